"""Barrier synthesis for linear networks via structured matrix inequalities.

Two constructions are provided:

* ``synthesize_origin``: the safe set is the origin (gamma_x = 0,
  gamma_f = 1). The decrease condition becomes a structured Lyapunov
  inequality in the inverse shape matrices E_l = P_l^{-1} and the
  transformed gains Y_l = K_l @ blkdiag(E_j); quadratic relaxation
  matrices are bounded blockwise so their network sum is nonpositive.
  One conic solve.

* ``synthesize_ellipsoidal``: unit-level ellipsoidal safe sets
  (gamma_x = 1) with scalar relaxation coefficients b[l][j]. The joint
  problem is bilinear in (E, b), so it is solved by alternating two
  convex half-steps: the E-step grows sum(log det E) with the scalars
  fixed, and the b-step grows gamma_f with E fixed.

All solves run on an inverse-shape parameterization, so every returned
barrier certifies its conditions by construction; `scbf.verify_scbf_sampled`
can cross-check the result independently.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import SolverFailure, SynthesisInfeasible
from .model import NetworkModel
from .scbf import ELLIPSOIDAL, ORIGIN, AgentSCBF, SCBFSet

_OPTIMAL = "optimal"
_INACCURATE = "inaccurate"
_INFEASIBLE = "infeasible"
_UNBOUNDED = "unbounded"

# Solver option ladder: a tuned interior-point pass first, then stock
# settings, then a first-order fallback. Tried in order until a solve
# returns a usable status.
_SYNTH_LADDER = (
    {"solver": "CLARABEL"},
    {"solver": "SCS", "eps_abs": 1e-9, "eps_rel": 1e-9, "max_iters": 200000},
)


@dataclass(frozen=True)
class SynthesisConfig:
    variant: str = ORIGIN
    max_outer_iters: int = 30
    rel_improvement_tol: float = 1e-3
    rho_init: float = 0.1
    enforce_vmax: bool = False
    psd_margin: float = 1e-8
    # support-function cap of each recovery domain against the inflated
    # state box; keeps the log-det objective bounded for agents whose
    # inputs never bind (finite v_max rows use h + v_max instead)
    domain_cap: float = 10.0
    # lower bound on the origin-variant decrease, relative to the
    # barrier value (D >= min_decrease * P)
    min_decrease: float = 1e-3
    gamma_f_init: float = 0.1
    gamma_f_max: float = 1e6
    sum_margin: float = 1e-9

    def __post_init__(self):
        if self.variant not in (ORIGIN, ELLIPSOIDAL):
            raise ValueError(f"unknown variant {self.variant!r}")
        for name in ("rel_improvement_tol", "psd_margin", "rho_init"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# generic conic-problem wrapper


@dataclass
class ConicProblem:
    """A named-variable convex problem handed to `solve_conic`."""

    objective: object
    constraints: list
    variables: dict

    def cvxpy_problem(self) -> cp.Problem:
        return cp.Problem(self.objective, self.constraints)


@dataclass
class ConicSolution:
    status: str
    objective_value: float
    values: dict


def _normalize_status(status: str) -> str:
    if status == cp.OPTIMAL:
        return _OPTIMAL
    if status == cp.OPTIMAL_INACCURATE:
        return _INACCURATE
    if status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        return _INFEASIBLE
    if status in (cp.UNBOUNDED, cp.UNBOUNDED_INACCURATE):
        return _UNBOUNDED
    return status


def _solve_ladder(prob: cp.Problem, ladder=_SYNTH_LADDER) -> str:
    """Try solver options in order; return the first usable normalized status."""
    last_exc = None
    for opts in ladder:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                prob.solve(**opts)
        except cp.error.SolverError as exc:
            last_exc = exc
            continue
        status = _normalize_status(prob.status)
        if status in (_OPTIMAL, _INFEASIBLE, _UNBOUNDED):
            return status
        if status == _INACCURATE and opts is ladder[-1]:
            return status
    if last_exc is not None and prob.status is None:
        raise SolverFailure(f"all solver attempts failed: {last_exc}")
    return _normalize_status(prob.status)


def solve_conic(problem: ConicProblem, ladder=_SYNTH_LADDER) -> ConicSolution:
    """Solve a ConicProblem, reporting infeasibility in the status (not raising)."""
    prob = problem.cvxpy_problem()
    status = _solve_ladder(prob, ladder)
    values = {}
    if status in (_OPTIMAL, _INACCURATE):
        values = {k: np.array(v.value) for k, v in problem.variables.items()}
    obj = prob.value if prob.value is not None else math.nan
    return ConicSolution(status=status, objective_value=obj, values=values)


# ---------------------------------------------------------------------------
# shared structured-LMI plumbing


def _neighbor_dims(network: NetworkModel, l: int) -> int:
    return sum(network.dynamics[j].n for j in network.topology.neighbors(l))


def _lift(network: NetworkModel, l: int, j: int) -> np.ndarray:
    """Embedding of agent j's coordinates into agent l's stacked neighbor coordinates."""
    order = network.topology.neighbors(l)
    nN = _neighbor_dims(network, l)
    out = np.zeros((nN, network.dynamics[j].n))
    r = 0
    for q in order:
        nq = network.dynamics[q].n
        if q == j:
            out[r : r + nq, :] = np.eye(nq)
            break
        r += nq
    return out


def _blkdiag_expr(blocks: list):
    sizes = [b.shape[0] for b in blocks]
    rows = []
    for i, bi in enumerate(blocks):
        rows.append(
            [bi if i == j else np.zeros((sizes[i], sizes[j])) for j in range(len(blocks))]
        )
    return cp.bmat(rows)


def _np_blkdiag(blocks: list) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    r = 0
    for b in blocks:
        k = b.shape[0]
        out[r : r + k, r : r + k] = b
        r += k
    return out


def _coupled_A(network: NetworkModel, l: int) -> np.ndarray:
    return network.dynamics[l].A


def _input_limit_lmis(network, l, Y, EN, level_expr, margin):
    """Schur blocks guaranteeing |H_u K x_N| <= h_u over the product of domains.

    ``level_expr`` is (h_u_i^2 / |N_l|) * (1 / domain level); affine in
    either E (fixed level) or the inverse level (fixed E).
    """
    cons = []
    con = network.constraints[l].input_poly
    nN = EN.shape[0]
    for i in range(con.rows):
        Hi = con.H[i : i + 1]
        top_left = level_expr(con.h[i])
        block = cp.bmat([[top_left, Hi @ Y], [(Hi @ Y).T, EN]])
        cons.append(block >> margin * np.eye(nN + 1))
    return cons


def _domain_support_constraints(network, l, E_l, cfg: SynthesisConfig, level: float):
    """Support-function rows bounding the level-``level`` domain ellipsoid.

    Rows with a finite violation tolerance enforce the recovery-domain
    containment H E H' * level <= (h + v_max)^2; the remaining rows are
    capped against the domain_cap-inflated box so the volume objective
    stays bounded.
    """
    cons = []
    poly = network.constraints[l].state_poly
    vmax = network.constraints[l].v_max
    for i in range(poly.rows):
        Hi = poly.H[i : i + 1]
        if cfg.enforce_vmax and np.isfinite(vmax[i]):
            bound = (poly.h[i] + vmax[i]) ** 2 / level
        else:
            bound = (cfg.domain_cap * poly.h[i]) ** 2 / level
        cons.append(Hi @ E_l @ Hi.T <= bound)
    return cons


def enforce_vmax_constraint(
    problem: ConicProblem, network: NetworkModel, gamma_f: float, gamma_x: float = 0.0
) -> ConicProblem:
    """Add recovery-domain containment rows to a synthesis problem.

    For every finite v_max row adds H E H' <= (h + v_max)^2 / (gamma_x +
    gamma_f), the support-function bound of the domain ellipsoid against
    the tolerance-inflated constraint row. Rows with infinite tolerance
    are skipped. Convex in E for fixed gamma_f.
    """
    level = gamma_x + gamma_f
    cons = list(problem.constraints)
    for l in range(network.agent_count):
        poly = network.constraints[l].state_poly
        vmax = network.constraints[l].v_max
        E_l = problem.variables.get(f"E_{l}")
        if E_l is None:
            raise KeyError(f"problem is missing variable E_{l}")
        for i in range(poly.rows):
            if not np.isfinite(vmax[i]):
                continue
            Hi = poly.H[i : i + 1]
            cons.append(Hi @ E_l @ Hi.T <= (poly.h[i] + vmax[i]) ** 2 / level)
    return ConicProblem(objective=problem.objective, constraints=cons, variables=problem.variables)


def support_over_domain(scbf: AgentSCBF, gamma_f: float, H_row: np.ndarray) -> float:
    """Exact maximum of H_row @ x over the domain ellipsoid x'Px <= gamma_x + gamma_f."""
    level = scbf.gamma_x + gamma_f
    q = float(H_row @ scbf.E @ H_row)
    return math.sqrt(max(level * q, 0.0))


# ---------------------------------------------------------------------------
# origin variant


def _origin_problem(network: NetworkModel, cfg: SynthesisConfig) -> ConicProblem:
    L = network.agent_count
    dims = network.state_dims()
    E = [cp.Variable((n, n), symmetric=True) for n in dims]
    Dt = [cp.Variable((n, n), symmetric=True) for n in dims]
    Y, Gt, St = [], [], []
    for l in range(L):
        nN = _neighbor_dims(network, l)
        Y.append(cp.Variable((network.dynamics[l].m, nN)))
        Gt.append(cp.Variable((nN, nN), symmetric=True))
        St.append({j: cp.Variable((dims[j], dims[j]), symmetric=True) for j in
                   network.topology.neighbors(l)})

    m = cfg.psd_margin
    cons = []
    for l in range(L):
        order = network.topology.neighbors(l)
        n, nN = dims[l], _neighbor_dims(network, l)
        EN = _blkdiag_expr([E[j] for j in order])
        AEBY = _coupled_A(network, l) @ EN + network.dynamics[l].B @ Y[l]
        lift_own = _lift(network, l, l)
        cons.append(E[l] >> 1e-6 * np.eye(n))
        cons.append(Dt[l] >> cfg.min_decrease * E[l])
        top_left = lift_own @ (E[l] - Dt[l]) @ lift_own.T + Gt[l]
        cons.append(cp.bmat([[top_left, AEBY.T], [AEBY, E[l]]]) >> m * np.eye(nN + n))
        cons.append(Gt[l] << _blkdiag_expr([St[l][j] for j in order]))
        # inputs limited over the product of level-1 domains
        size = len(order)
        cons += _input_limit_lmis(
            network, l, Y[l], EN,
            lambda h_i, size=size: np.array([[h_i**2 / size]]),
            m,
        )
        cons += _domain_support_constraints(network, l, E[l], cfg, level=1.0)
    for j in range(L):
        group = [l for l in range(L) if j in network.topology.neighbors(l)]
        cons.append(sum(St[l][j] for l in group) << -cfg.sum_margin * np.eye(dims[j]))

    variables = {}
    for l in range(L):
        variables[f"E_{l}"] = E[l]
        variables[f"Y_{l}"] = Y[l]
        variables[f"Gt_{l}"] = Gt[l]
        variables[f"Dt_{l}"] = Dt[l]
    return ConicProblem(
        objective=cp.Maximize(sum(cp.log_det(Ei) for Ei in E)),
        constraints=cons,
        variables=variables,
    )


def _locate_infeasible_agent(network: NetworkModel, cfg: SynthesisConfig):
    """Probe agents one at a time (coupling dropped) to name an infeasible block."""
    for l in range(network.agent_count):
        dyn = network.dynamics[l]
        n = dyn.n
        lift_own = _lift(network, l, l)
        A_own = dyn.A @ lift_own
        E = cp.Variable((n, n), symmetric=True)
        Y = cp.Variable((dyn.m, n))
        Dt = cp.Variable((n, n), symmetric=True)
        AEBY = A_own @ E + dyn.B @ Y
        cons = [
            E >> 1e-6 * np.eye(n),
            Dt >> cfg.min_decrease * E,
            cp.bmat([[E - Dt, AEBY.T], [AEBY, E]]) >> cfg.psd_margin * np.eye(2 * n),
        ]
        con = network.constraints[l].input_poly
        for i in range(con.rows):
            Hi = con.H[i : i + 1]
            cons.append(
                cp.bmat([[np.array([[con.h[i] ** 2]]), Hi @ Y], [(Hi @ Y).T, E]]) >> 0
            )
        prob = cp.Problem(cp.Maximize(cp.log_det(E)), cons)
        if _solve_ladder(prob) in (_INFEASIBLE, _UNBOUNDED):
            return l
    return None


def _recover_origin_set(network, cfg, values) -> SCBFSet:
    L = network.agent_count
    agents = []
    for l in range(L):
        order = network.topology.neighbors(l)
        E_l = values[f"E_{l}"]
        ENv = _np_blkdiag([values[f"E_{j}"] for j in order])
        EN_inv = np.linalg.inv(ENv)
        P = np.linalg.inv(E_l)
        P = 0.5 * (P + P.T)
        K = values[f"Y_{l}"] @ EN_inv
        Gamma = EN_inv @ values[f"Gt_{l}"] @ EN_inv
        E_inv = np.linalg.inv(E_l)
        D = E_inv @ values[f"Dt_{l}"] @ E_inv
        agents.append(AgentSCBF(P=P, gamma_x=0.0, K=K, Gamma=Gamma, D=D))
    return SCBFSet(
        variant=ORIGIN, agents=tuple(agents), gamma_f=1.0, vmax_enforced=cfg.enforce_vmax
    )


def synthesize_origin(network: NetworkModel, config: SynthesisConfig = None) -> SCBFSet:
    """Origin-safe-set synthesis: one structured semidefinite solve.

    Returns a barrier set with gamma_x = 0 and gamma_f = 1 whose
    feedback renders the network contractive toward the origin.
    Raises SynthesisInfeasible when no structured certificate exists,
    naming an offending agent when a decoupled probe can identify one.
    """
    cfg = config or SynthesisConfig(variant=ORIGIN)
    problem = _origin_problem(network, cfg)
    sol = solve_conic(problem)
    if sol.status in (_INFEASIBLE, _UNBOUNDED):
        agent = _locate_infeasible_agent(network, cfg)
        detail = f" (agent {agent} fails a decoupled probe)" if agent is not None else ""
        raise SynthesisInfeasible(
            f"origin-variant synthesis {sol.status}{detail}", agent=agent
        )
    if sol.status not in (_OPTIMAL, _INACCURATE):
        raise SolverFailure(f"origin-variant synthesis returned status {sol.status}")
    return _recover_origin_set(network, cfg, sol.values)


def closed_loop_matrix(network: NetworkModel, scbfs: SCBFSet) -> np.ndarray:
    """Global closed-loop map A + B K_struct under the terminal feedback."""
    from .model import global_matrices, selection_matrices

    A, B = global_matrices(network)
    Kg = np.zeros((network.input_dim, network.state_dim))
    for l in range(network.agent_count):
        _, W = selection_matrices(network, l)
        Kg[network.input_offsets[l] : network.input_offsets[l + 1], :] = scbfs.agents[l].K @ W
    return A + B @ Kg


# ---------------------------------------------------------------------------
# ellipsoidal variant: alternating minimization


def _dynamic_coupling(network: NetworkModel, l: int, j: int) -> bool:
    """True when agent l's dynamics actually read agent j's state."""
    if j == l:
        return True
    order = network.topology.neighbors(l)
    c = 0
    for q in order:
        nq = network.dynamics[q].n
        if q == j:
            return bool(np.any(network.dynamics[l].A[:, c : c + nq] != 0.0))
        c += nq
    return False


def _heuristic_b(network: NetworkModel, coupling: float, margin: float) -> dict:
    """Feasible-by-structure starting relaxation coefficients.

    Each dynamically coupled neighbor contributes ``coupling``; the
    diagonal absorbs the incoming total so every column sum is strictly
    negative.
    """
    L = network.agent_count
    b = {l: {j: 0.0 for j in network.topology.neighbors(l)} for l in range(L)}
    for l in range(L):
        for j in network.topology.neighbors(l):
            if j != l and _dynamic_coupling(network, l, j):
                b[l][j] = coupling
    for j in range(L):
        indeg = sum(
            1
            for l in range(L)
            if j in network.topology.neighbors(l) and l != j and _dynamic_coupling(network, l, j)
        )
        b[j][j] = -coupling * indeg - margin
    return b


def altmin_step_E(network: NetworkModel, fixed: dict, config: SynthesisConfig = None) -> dict:
    """Convex half-step in (E, Y): maximize sum(log det E) with scalars fixed.

    ``fixed`` needs keys ``b`` (nested dict), ``rho`` (list), ``gamma_f``.
    Returns dict with E, Y, logdet, status.
    """
    cfg = config or SynthesisConfig(variant=ELLIPSOIDAL)
    L = network.agent_count
    dims = network.state_dims()
    bv, rhov, gf = fixed["b"], fixed["rho"], fixed["gamma_f"]
    E = [cp.Variable((n, n), symmetric=True) for n in dims]
    Y = [cp.Variable((network.dynamics[l].m, _neighbor_dims(network, l))) for l in range(L)]
    m = cfg.psd_margin
    cons = []
    for l in range(L):
        order = network.topology.neighbors(l)
        n, nN = dims[l], _neighbor_dims(network, l)
        EN = _blkdiag_expr([E[j] for j in order])
        AEBY = _coupled_A(network, l) @ EN + network.dynamics[l].B @ Y[l]
        cons.append(E[l] >> 1e-6 * np.eye(n))
        M = sum(bv[l][j] * (_lift(network, l, j) @ E[j] @ _lift(network, l, j).T) for j in order)
        Ebar = _lift(network, l, l) @ E[l] @ _lift(network, l, l).T
        cons.append(
            cp.bmat([[(1 - rhov[l]) * Ebar + M, AEBY.T], [AEBY, E[l]]]) >> m * np.eye(nN + n)
        )
        size = len(order)
        cons += _input_limit_lmis(
            network, l, Y[l], EN,
            lambda h_i, size=size: np.array([[h_i**2 / (size * (1.0 + gf))]]),
            m,
        )
        # unit-level safe set inside the state constraints
        poly = network.constraints[l].state_poly
        for i in range(poly.rows):
            Hi = poly.H[i : i + 1]
            cons.append(Hi @ E[l] @ Hi.T <= poly.h[i] ** 2)
        if cfg.enforce_vmax:
            vmax = network.constraints[l].v_max
            for i in range(poly.rows):
                if np.isfinite(vmax[i]):
                    Hi = poly.H[i : i + 1]
                    cons.append(Hi @ E[l] @ Hi.T <= (poly.h[i] + vmax[i]) ** 2 / (1.0 + gf))
    prob = cp.Problem(cp.Maximize(sum(cp.log_det(Ei) for Ei in E)), cons)
    status = _solve_ladder(prob)
    if status not in (_OPTIMAL, _INACCURATE):
        return {"status": status}
    return {
        "status": status,
        "E": [np.array(Ei.value) for Ei in E],
        "Y": [np.array(Yl.value) for Yl in Y],
        "logdet": float(prob.value),
    }


def altmin_step_b(network: NetworkModel, fixed: dict, config: SynthesisConfig = None) -> dict:
    """Convex half-step in (b, Y, rho, gamma_f) with the shapes E fixed.

    Maximizes gamma_f through its inverse level 1/(1+gamma_f). Returns
    dict with b, K, Y, rho, gamma_f, status.
    """
    cfg = config or SynthesisConfig(variant=ELLIPSOIDAL)
    L = network.agent_count
    E_cur = fixed["E"]
    for l in range(L):
        if np.linalg.cond(E_cur[l]) > 1e12:
            return {"status": "numerical_failure"}
    b = {l: {j: cp.Variable() for j in network.topology.neighbors(l)} for l in range(L)}
    rho = [cp.Variable() for _ in range(L)]
    ginv = cp.Variable(nonneg=True)  # 1 / (1 + gamma_f)
    Y = [cp.Variable((network.dynamics[l].m, _neighbor_dims(network, l))) for l in range(L)]
    m = cfg.psd_margin
    cons = [ginv >= 1.0 / (1.0 + cfg.gamma_f_max), ginv <= 1.0 / (1.0 + 1e-6)]
    for l in range(L):
        order = network.topology.neighbors(l)
        n, nN = network.dynamics[l].n, _neighbor_dims(network, l)
        ENv = _np_blkdiag([E_cur[j] for j in order])
        AEBY = _coupled_A(network, l) @ ENv + network.dynamics[l].B @ Y[l]
        cons += [rho[l] >= 1e-6, rho[l] <= 1.0]
        for j in order:
            if j != l:
                cons.append(b[l][j] >= 0)
        cons.append(1.0 - rho[l] + b[l][l] >= 0)
        cons.append(sum(b[l][j] for j in order) <= rho[l])
        M = sum(
            b[l][j] * (_lift(network, l, j) @ E_cur[j] @ _lift(network, l, j).T) for j in order
        )
        Ebar = _lift(network, l, l) @ E_cur[l] @ _lift(network, l, l).T
        cons.append(
            cp.bmat([[(1 - rho[l]) * Ebar + M, AEBY.T], [AEBY, E_cur[l]]]) >> m * np.eye(nN + n)
        )
        size = len(order)
        cons += _input_limit_lmis(
            network, l, Y[l], ENv,
            lambda h_i, size=size, g=ginv: cp.reshape(h_i**2 / size * g, (1, 1), order="C"),
            0.0,
        )
        if cfg.enforce_vmax:
            poly = network.constraints[l].state_poly
            vmax = network.constraints[l].v_max
            for i in range(poly.rows):
                if np.isfinite(vmax[i]):
                    Hi = poly.H[i : i + 1]
                    q = float(Hi @ E_cur[l] @ Hi.T)
                    cons.append(q <= (poly.h[i] + vmax[i]) ** 2 * ginv)
    for j in range(L):
        group = [l for l in range(L) if j in network.topology.neighbors(l)]
        cons.append(sum(b[l][j] for l in group) <= -cfg.sum_margin)
    prob = cp.Problem(cp.Minimize(ginv), cons)
    status = _solve_ladder(prob)
    if status not in (_OPTIMAL, _INACCURATE):
        return {"status": status}
    gf = 1.0 / float(ginv.value) - 1.0
    K = []
    for l in range(L):
        ENv = _np_blkdiag([E_cur[j] for j in network.topology.neighbors(l)])
        K.append(np.array(Y[l].value) @ np.linalg.inv(ENv))
    return {
        "status": status,
        "b": {l: {j: float(b[l][j].value) for j in network.topology.neighbors(l)} for l in range(L)},
        "Y": [np.array(Yl.value) for Yl in Y],
        "K": K,
        "rho": [float(r.value) for r in rho],
        "gamma_f": gf,
    }


@dataclass
class EllipsoidalSynthesisResult:
    scbfs: SCBFSet
    trace: list = field(default_factory=list)
    stalled: bool = False


def _build_ellipsoidal_set(network, cfg, E, Y, bv, rhov, gf) -> SCBFSet:
    agents = []
    for l in range(network.agent_count):
        ENv = _np_blkdiag([E[j] for j in network.topology.neighbors(l)])
        P = np.linalg.inv(E[l])
        P = 0.5 * (P + P.T)
        K = Y[l] @ np.linalg.inv(ENv)
        agents.append(AgentSCBF(P=P, gamma_x=1.0, K=K, rho=rhov[l], b=dict(bv[l])))
    return SCBFSet(
        variant=ELLIPSOIDAL, agents=tuple(agents), gamma_f=gf, vmax_enforced=cfg.enforce_vmax
    )


def synthesize_ellipsoidal(
    network: NetworkModel, config: SynthesisConfig = None
) -> EllipsoidalSynthesisResult:
    """Ellipsoidal-safe-set synthesis by alternating convex half-steps.

    Starts from structure-derived relaxation coefficients (each
    dynamically coupled neighbor gets a positive coefficient, the
    diagonal absorbs the column sum), swept over a few magnitudes until
    the first E-step is feasible. Each outer iteration then runs a
    b-step (grows gamma_f) and an E-step (grows the safe-set volume);
    a half-step that fails or regresses keeps the previous iterate and
    stops with the stall flag, so the reported trace is nondecreasing.
    """
    cfg = config or SynthesisConfig(variant=ELLIPSOIDAL)
    L = network.agent_count
    rhov = [cfg.rho_init] * L
    gf = cfg.gamma_f_init

    first = None
    for coupling in (0.05, 0.1, 0.2, 0.02, 0.4):
        bv = _heuristic_b(network, coupling, cfg.sum_margin)
        first = altmin_step_E(network, {"b": bv, "rho": rhov, "gamma_f": gf}, cfg)
        if first["status"] in (_OPTIMAL, _INACCURATE):
            break
    if first is None or first["status"] not in (_OPTIMAL, _INACCURATE):
        raise SynthesisInfeasible(
            "ellipsoidal synthesis infeasible at initialization "
            f"(last E-step status {first['status'] if first else 'none'})"
        )
    E_cur, Y_cur, logdet = first["E"], first["Y"], first["logdet"]

    trace = [{"iteration": 0, "logdet": logdet, "gamma_f": gf, "status": "init"}]
    stalled = False
    for it in range(1, cfg.max_outer_iters + 1):
        prev_obj = logdet + math.log1p(gf)
        bstep = altmin_step_b(network, {"E": E_cur}, cfg)
        if bstep["status"] not in (_OPTIMAL, _INACCURATE) or bstep["gamma_f"] < gf - 1e-9:
            stalled = True
            trace.append(
                {"iteration": it, "logdet": logdet, "gamma_f": gf, "status": "stall_b"}
            )
            break
        bv, rhov, gf, Y_cur = bstep["b"], bstep["rho"], bstep["gamma_f"], bstep["Y"]
        estep = altmin_step_E(network, {"b": bv, "rho": rhov, "gamma_f": gf}, cfg)
        if estep["status"] not in (_OPTIMAL, _INACCURATE) or estep["logdet"] < logdet - 1e-9:
            stalled = True
            trace.append(
                {"iteration": it, "logdet": logdet, "gamma_f": gf, "status": "stall_E"}
            )
            break
        E_cur, Y_cur, logdet = estep["E"], estep["Y"], estep["logdet"]
        trace.append({"iteration": it, "logdet": logdet, "gamma_f": gf, "status": "ok"})
        new_obj = logdet + math.log1p(gf)
        if abs(new_obj - prev_obj) < cfg.rel_improvement_tol * max(1.0, abs(prev_obj)):
            break

    scbfs = _build_ellipsoidal_set(network, cfg, E_cur, Y_cur, bv, rhov, gf)
    return EllipsoidalSynthesisResult(scbfs=scbfs, trace=trace, stalled=stalled)
