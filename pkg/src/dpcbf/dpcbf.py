"""Finite-horizon recovery optimization and the frozen-slack safety filter.

The recovery problem minimizes, over trajectories that respect the
dynamics and input limits, the total slack needed to satisfy the
tightened state constraints plus a weighted terminal slack measuring the
distance of each agent's terminal state to its barrier safe set:

    h_DPB(x) = min sum_l ( alpha_f * xi_l_N + sum_i ||xi_l_i||_1 )

Its optimal value is zero exactly on the recoverable-without-violation
set, and acts as a network-level barrier: the safety filter then picks
the input closest to the proposed one among trajectories feasible with
the slacks frozen at their optimal values.

Stage slacks are per-constraint-row vectors (one entry per row of the
state polytope), so row-wise violation bounds stay meaningful. Stage
costs use the 1-norm (linear, exact-penalty form); the filter objective
is the squared deviation of the first input.

Problems are parameterized in the current state (and, for the filter,
the frozen slacks and the proposal), so repeated solves along a
trajectory reuse the compiled problem.
"""

from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np

from .errors import DimensionError, FilterInfeasible, InfeasibleProblem, SolverFailure
from .model import NetworkModel
from .scbf import SCBFSet

# default option ladder for the quadratically constrained solves; the
# leading entry matches the package-wide solver tolerances
_QP_LADDER = (
    {"solver": "CLARABEL", "tol_feas": 1e-7, "tol_gap_abs": 1e-6, "tol_gap_rel": 1e-6},
    {"solver": "CLARABEL"},
    {"solver": "SCS", "eps_abs": 1e-7, "eps_rel": 1e-7},
)


@dataclass(frozen=True)
class DPCBFParams:
    """Horizon, penalty, and tightening schedule of the recovery problem."""

    horizon: int
    alpha_f: float = 1e3
    delta: float = 1e-3
    solver_tol: float = 1e-6
    # inflation added to frozen slacks so the filter's feasible set has
    # interior at solver accuracy
    feasibility_pad: float = 1e-7

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if self.alpha_f <= 0:
            raise ValueError("alpha_f must be positive")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")

    def tightening(self, i: int) -> float:
        return self.delta * i


@dataclass
class DPCBFSolution:
    """Optimal trajectories and slacks of one recovery solve.

    ``states[l]`` has shape (n_l, N+1), ``inputs[l]`` (m_l, N),
    ``stage_slacks[l]`` (rows_l, N); ``terminal_slacks[l]`` is a scalar.
    ``value`` is recomputed from the (clipped, nonnegative) slacks so it
    is consistent with them by construction.
    """

    states: list
    inputs: list
    stage_slacks: list
    terminal_slacks: list
    value: float
    status: str
    solve_time: float = 0.0

    @property
    def agent_count(self) -> int:
        return len(self.states)

    def first_input(self, network: NetworkModel) -> np.ndarray:
        return np.concatenate([self.inputs[l][:, 0] for l in range(len(self.inputs))])


def _solve_qcqp(prob: cp.Problem, ladder=_QP_LADDER) -> str:
    last_exc = None
    for opts in ladder:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                prob.solve(**opts)
        except cp.error.SolverError as exc:
            last_exc = exc
            continue
        if prob.status == cp.OPTIMAL:
            return "optimal"
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
            return "infeasible"
        if prob.status == cp.OPTIMAL_INACCURATE and opts is ladder[-1]:
            return "inaccurate"
    if prob.status == cp.OPTIMAL_INACCURATE:
        return "inaccurate"
    raise SolverFailure(f"QCQP solve failed (last status {prob.status!r}): {last_exc}")


def _check_state(network: NetworkModel, x_t) -> np.ndarray:
    x = np.asarray(x_t, dtype=float).reshape(-1)
    if x.shape[0] != network.state_dim:
        raise DimensionError(
            f"state has dimension {x.shape[0]}, network expects {network.state_dim}"
        )
    return x


class DPCBFProblem:
    """Compiled recovery problem, parameterized in the current state."""

    def __init__(self, network: NetworkModel, scbfs: SCBFSet, params: DPCBFParams):
        if scbfs is None:
            raise ValueError("a barrier set is required to build the recovery problem")
        if len(scbfs.agents) != network.agent_count:
            raise DimensionError("barrier set size does not match network")
        self.network = network
        self.scbfs = scbfs
        self.params = params
        L = network.agent_count
        N = params.horizon
        self.x0 = cp.Parameter(network.state_dim)
        self.X = [cp.Variable((network.dynamics[l].n, N + 1)) for l in range(L)]
        self.U = [cp.Variable((network.dynamics[l].m, N)) for l in range(L)]
        self.XI = [
            cp.Variable((network.constraints[l].state_poly.rows, N), nonneg=True)
            for l in range(L)
        ]
        self.XIN = [cp.Variable(nonneg=True) for _ in range(L)]
        cons = []
        for l in range(L):
            dyn = network.dynamics[l]
            spoly = network.constraints[l].state_poly
            upoly = network.constraints[l].input_poly
            cons.append(
                self.X[l][:, 0] == self.x0[network.state_offsets[l] : network.state_offsets[l + 1]]
            )
            order = network.topology.neighbors(l)
            blocks = _a_blocks(network, l)
            for i in range(N):
                rhs = sum(blocks[j] @ self.X[j][:, i] for j in order) + dyn.B @ self.U[l][:, i]
                cons.append(self.X[l][:, i + 1] == rhs)
                cons.append(
                    spoly.H @ self.X[l][:, i]
                    <= spoly.h + self.XI[l][:, i] - params.tightening(i)
                )
                cons.append(upoly.H @ self.U[l][:, i] <= upoly.h)
            a = scbfs.agents[l]
            cons.append(cp.quad_form(self.X[l][:, N], a.P) - a.gamma_x <= self.XIN[l])
        objective = sum(
            params.alpha_f * self.XIN[l] + cp.sum(self.XI[l]) for l in range(L)
        )
        self.problem = cp.Problem(cp.Minimize(objective), cons)

    def set_state(self, x_t) -> None:
        self.x0.value = _check_state(self.network, x_t)

    def solve(self) -> DPCBFSolution:
        if self.x0.value is None:
            raise ValueError("no state bound; call set_state first")
        t0 = time.perf_counter()
        status = _solve_qcqp(self.problem)
        elapsed = time.perf_counter() - t0
        if status == "infeasible":
            # slacks are unbounded above, so this can only be numerical
            raise SolverFailure("recovery problem reported infeasible (numerically)")
        L = self.network.agent_count
        stage = [np.maximum(np.array(self.XI[l].value), 0.0) for l in range(L)]
        term = [max(float(self.XIN[l].value), 0.0) for l in range(L)]
        value = sum(
            self.params.alpha_f * term[l] + float(stage[l].sum()) for l in range(L)
        )
        return DPCBFSolution(
            states=[np.array(self.X[l].value) for l in range(L)],
            inputs=[np.array(self.U[l].value) for l in range(L)],
            stage_slacks=stage,
            terminal_slacks=term,
            value=value,
            status=status,
            solve_time=elapsed,
        )


def _a_blocks(network: NetworkModel, l: int) -> dict:
    """Split agent l's coupled A into per-neighbor column blocks."""
    out = {}
    c = 0
    for j in network.topology.neighbors(l):
        nj = network.dynamics[j].n
        out[j] = network.dynamics[l].A[:, c : c + nj]
        c += nj
    return out


def build_dpcbf(
    network: NetworkModel, scbfs: SCBFSet, params: DPCBFParams, x_t
) -> DPCBFProblem:
    """Build the recovery problem at the given state."""
    prob = DPCBFProblem(network, scbfs, params)
    prob.set_state(x_t)
    return prob


def solve_dpcbf_central(problem: DPCBFProblem) -> DPCBFSolution:
    """Solve the recovery problem with the centralized solver."""
    return problem.solve()


class SafetyFilterProblem:
    """Compiled frozen-slack filter, parameterized in state, slacks, and proposal."""

    def __init__(self, network: NetworkModel, scbfs: SCBFSet, params: DPCBFParams):
        self.network = network
        self.scbfs = scbfs
        self.params = params
        L = network.agent_count
        N = params.horizon
        self.x0 = cp.Parameter(network.state_dim)
        self.u_p = cp.Parameter(network.input_dim)
        self.XI = [
            cp.Parameter((network.constraints[l].state_poly.rows, N), nonneg=True)
            for l in range(L)
        ]
        self.XIN = [cp.Parameter(nonneg=True) for _ in range(L)]
        self.X = [cp.Variable((network.dynamics[l].n, N + 1)) for l in range(L)]
        self.U = [cp.Variable((network.dynamics[l].m, N)) for l in range(L)]
        cons = []
        for l in range(L):
            dyn = network.dynamics[l]
            spoly = network.constraints[l].state_poly
            upoly = network.constraints[l].input_poly
            cons.append(
                self.X[l][:, 0] == self.x0[network.state_offsets[l] : network.state_offsets[l + 1]]
            )
            blocks = _a_blocks(network, l)
            for i in range(N):
                rhs = (
                    sum(blocks[j] @ self.X[j][:, i] for j in network.topology.neighbors(l))
                    + dyn.B @ self.U[l][:, i]
                )
                cons.append(self.X[l][:, i + 1] == rhs)
                cons.append(
                    spoly.H @ self.X[l][:, i]
                    <= spoly.h + self.XI[l][:, i] - params.tightening(i)
                )
                cons.append(upoly.H @ self.U[l][:, i] <= upoly.h)
            a = scbfs.agents[l]
            cons.append(cp.quad_form(self.X[l][:, N], a.P) - a.gamma_x <= self.XIN[l])
        objective = sum(
            cp.sum_squares(
                self.U[l][:, 0]
                - self.u_p[network.input_offsets[l] : network.input_offsets[l + 1]]
            )
            for l in range(L)
        )
        self.problem = cp.Problem(cp.Minimize(objective), cons)

    def set_instance(self, x_t, slacks, u_p, pad: float = None) -> None:
        """Bind state, frozen slacks (stage list + terminal list), and proposal."""
        self.x0.value = _check_state(self.network, x_t)
        u = np.asarray(u_p, dtype=float).reshape(-1)
        if u.shape[0] != self.network.input_dim:
            raise DimensionError("proposed input dimension mismatch")
        self.u_p.value = u
        pad = self.params.feasibility_pad if pad is None else pad
        stage, term = slacks
        for l in range(self.network.agent_count):
            self.XI[l].value = np.maximum(np.asarray(stage[l], float), 0.0) + pad
            self.XIN[l].value = max(float(term[l]), 0.0) + pad

    def solve(self) -> np.ndarray:
        if self.x0.value is None:
            raise ValueError("no instance bound; call set_instance first")
        status = _solve_qcqp(self.problem)
        if status == "infeasible":
            raise FilterInfeasible(
                "frozen-slack filter infeasible; slacks do not certify this state"
            )
        return np.concatenate(
            [self.U[l].value[:, 0] for l in range(self.network.agent_count)]
        )

    def deviation(self) -> float:
        return float(self.problem.value)


def build_safety_filter(
    network: NetworkModel,
    scbfs: SCBFSet,
    params: DPCBFParams,
    x_t,
    slacks_star,
    u_p,
) -> SafetyFilterProblem:
    """Build the filter at a state with frozen slacks from a solved recovery problem.

    ``slacks_star`` is either a DPCBFSolution or a (stage_slacks,
    terminal_slacks) pair.
    """
    prob = SafetyFilterProblem(network, scbfs, params)
    if isinstance(slacks_star, DPCBFSolution):
        slacks = (slacks_star.stage_slacks, slacks_star.terminal_slacks)
    else:
        slacks = slacks_star
    prob.set_instance(x_t, slacks, u_p)
    return prob


def solve_safety_filter(problem: SafetyFilterProblem) -> np.ndarray:
    """Return the filtered global input u(t); raises FilterInfeasible when empty."""
    return problem.solve()


def zero_slacks(network: NetworkModel, params: DPCBFParams):
    """All-zero frozen slacks: turns the filter into a hard-constrained one."""
    stage = [
        np.zeros((network.constraints[l].state_poly.rows, params.horizon))
        for l in range(network.agent_count)
    ]
    term = [0.0] * network.agent_count
    return stage, term


# ---------------------------------------------------------------------------
# plain-text interchange of problem data for external cross-checks


def export_problem_text(
    network: NetworkModel, scbfs: SCBFSet, params: DPCBFParams, x_t
) -> str:
    """Serialize the full problem data to a simple line-oriented text format.

    Layout: a header with scalar parameters, then one block per agent
    with its matrices written row-major (one row per line). The format
    is read back by `parse_problem_text`.
    """
    x = _check_state(network, x_t)
    buf = io.StringIO()
    w = buf.write
    w("dpcbf-problem v1\n")
    w(f"agents {network.agent_count}\n")
    w(f"horizon {params.horizon}\n")
    w(f"alpha_f {params.alpha_f!r}\n")
    w(f"delta {params.delta!r}\n")

    def mat(name, M):
        M = np.atleast_2d(M)
        w(f"{name} {M.shape[0]} {M.shape[1]}\n")
        for row in M:
            w(" ".join(repr(float(v)) for v in row) + "\n")

    for l in range(network.agent_count):
        dyn = network.dynamics[l]
        con = network.constraints[l]
        a = scbfs.agents[l]
        w(f"agent {l}\n")
        w("neighbors " + " ".join(str(j) for j in network.topology.neighbors(l)) + "\n")
        mat("A", dyn.A)
        mat("B", dyn.B)
        mat("Hx", con.state_poly.H)
        mat("hx", con.state_poly.h.reshape(1, -1))
        mat("Hu", con.input_poly.H)
        mat("hu", con.input_poly.h.reshape(1, -1))
        mat("P", a.P)
        w(f"gamma_x {a.gamma_x!r}\n")
        mat("x0", network.agent_state(x, l).reshape(1, -1))
    return buf.getvalue()


def parse_problem_text(text: str) -> dict:
    """Read the export format back into plain arrays (used by cross-check oracles)."""
    lines = iter(text.strip().splitlines())
    header = next(lines)
    if header != "dpcbf-problem v1":
        raise ValueError(f"unknown export header {header!r}")
    out = {"agents": []}

    def scalar(line, key, cast):
        k, v = line.split(maxsplit=1)
        assert k == key, f"expected {key}, got {k}"
        return cast(v)

    out["agent_count"] = scalar(next(lines), "agents", int)
    out["horizon"] = scalar(next(lines), "horizon", int)
    out["alpha_f"] = scalar(next(lines), "alpha_f", float)
    out["delta"] = scalar(next(lines), "delta", float)
    line = None
    for _ in range(out["agent_count"]):
        line = next(lines)
        assert line.startswith("agent ")
        agent = {}
        agent["neighbors"] = [int(t) for t in next(lines).split()[1:]]
        for key in ("A", "B", "Hx", "hx", "Hu", "hu", "P"):
            hdr = next(lines).split()
            assert hdr[0] == key
            r, c = int(hdr[1]), int(hdr[2])
            rows = [[float(t) for t in next(lines).split()] for _ in range(r)]
            agent[key] = np.array(rows).reshape(r, c)
        agent["gamma_x"] = scalar(next(lines), "gamma_x", float)
        hdr = next(lines).split()
        assert hdr[0] == "x0"
        agent["x0"] = np.array([float(t) for t in next(lines).split()])
        for key in ("hx", "hu", "x0"):
            agent[key] = np.asarray(agent[key]).reshape(-1)
        out["agents"].append(agent)
    return out
