"""Structured control barrier functions over a multi-agent network.

Each agent carries a quadratic barrier

    h_l(x_l) = max(0, x_l' P_l x_l - gamma_x_l)

whose zero set is the local safe set and whose gamma_f-sublevel set is
the local recovery domain. The network-level barrier is the sum of the
local values. Two parameterizations of the decrease bookkeeping are
supported:

* ``origin`` variant: gamma_x = 0, neighbor relaxation beta_l(x_N) =
  x_N' Gamma_l x_N, decrease Delta_h_l(x) = x' D_l x.
* ``ellipsoidal`` variant: gamma_x = 1, beta_l = sum_j b[l][j] h_j(x_j),
  decrease Delta_h_l = rho_l * h_l.

Verification here is sampling-based; the synthesis module certifies the
same conditions exactly through matrix inequalities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .model import NetworkModel

ORIGIN = "origin"
ELLIPSOIDAL = "ellipsoidal"


def _sym(a) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    m = 0.5 * (m + m.T)
    m.setflags(write=False)
    return m


@dataclass(frozen=True)
class AgentSCBF:
    """Barrier data of one agent.

    ``K`` is the structured terminal feedback gain acting on the stacked
    neighbor state. The relaxation payload depends on the variant: the
    ellipsoidal variant uses scalar coefficients ``b`` (keyed by neighbor
    index) and decrease rate ``rho``; the origin variant uses matrices
    ``Gamma`` (neighbor coordinates) and ``D`` (own coordinates).
    """

    P: np.ndarray
    gamma_x: float
    K: np.ndarray
    rho: float = None
    b: dict = None
    Gamma: np.ndarray = None
    D: np.ndarray = None

    def __post_init__(self):
        P = _sym(self.P)
        asym = float(np.max(np.abs(np.atleast_2d(np.asarray(self.P, float)) - P)))
        if asym > 1e-9:
            raise ValueError(f"P not symmetric (deviation {asym:.2e})")
        if np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("P must be positive definite")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "K", np.atleast_2d(np.asarray(self.K, float)))
        if self.gamma_x < 0:
            raise ValueError("gamma_x must be nonnegative")
        if self.Gamma is not None:
            object.__setattr__(self, "Gamma", _sym(self.Gamma))
        if self.D is not None:
            object.__setattr__(self, "D", _sym(self.D))

    @property
    def n(self) -> int:
        return self.P.shape[0]

    @property
    def E(self) -> np.ndarray:
        return np.linalg.inv(self.P)


@dataclass(frozen=True)
class SCBFSet:
    """Per-agent barriers plus the shared recovery level gamma_f.

    ``vmax_enforced`` records whether the synthesis bounded every
    recovery domain inside its agent's declared violation tolerances;
    the plug-and-play guard checks this flag.
    """

    variant: str
    agents: tuple
    gamma_f: float
    vmax_enforced: bool = False

    def __post_init__(self):
        if self.variant not in (ORIGIN, ELLIPSOIDAL):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.gamma_f <= 0:
            raise ValueError("gamma_f must be positive")
        object.__setattr__(self, "agents", tuple(self.agents))
        for a in self.agents:
            if self.variant == ELLIPSOIDAL and (a.b is None or a.rho is None):
                raise ValueError("ellipsoidal variant needs b and rho on every agent")
            if self.variant == ORIGIN and (a.Gamma is None or a.D is None):
                raise ValueError("origin variant needs Gamma and D on every agent")

    def __len__(self) -> int:
        return len(self.agents)


def eval_h(scbf: AgentSCBF, x_l: np.ndarray) -> float:
    """Local barrier value max(0, x'Px - gamma_x); zero exactly on the safe set."""
    x = np.asarray(x_l, dtype=float).reshape(-1)
    if x.shape[0] != scbf.n:
        raise DimensionError(f"expected state of dimension {scbf.n}")
    return max(0.0, float(x @ scbf.P @ x) - scbf.gamma_x)


def eval_network_h(scbfs: SCBFSet, network: NetworkModel, x: np.ndarray) -> float:
    """Network barrier: sum of local barrier values."""
    return sum(
        eval_h(scbfs.agents[l], network.agent_state(x, l)) for l in range(network.agent_count)
    )


def terminal_feedback(scbfs: SCBFSet, network: NetworkModel, x: np.ndarray) -> np.ndarray:
    """Structured linear feedback u_l = K_l @ x_{N_l}, stacked globally."""
    u = np.empty(network.input_dim)
    for l in range(network.agent_count):
        xN = network.neighbor_state(x, l)
        u[network.input_offsets[l] : network.input_offsets[l + 1]] = scbfs.agents[l].K @ xN
    return u


def eval_beta(scbfs: SCBFSet, network: NetworkModel, x: np.ndarray, l: int) -> float:
    """Neighbor relaxation term of agent l at the global state x."""
    a = scbfs.agents[l]
    if scbfs.variant == ELLIPSOIDAL:
        return sum(
            a.b[j] * eval_h(scbfs.agents[j], network.agent_state(x, j))
            for j in network.topology.neighbors(l)
        )
    xN = network.neighbor_state(x, l)
    return float(xN @ a.Gamma @ xN)


def eval_decrease(scbfs: SCBFSet, network: NetworkModel, x: np.ndarray, l: int) -> float:
    """Required decrease Delta_h_l at the global state x."""
    a = scbfs.agents[l]
    x_l = network.agent_state(x, l)
    if scbfs.variant == ELLIPSOIDAL:
        return a.rho * eval_h(a, x_l)
    return float(x_l @ a.D @ x_l)


def sample_domain(
    scbf: AgentSCBF, gamma_f: float, n_samples: int, rng: np.random.Generator, level: float = None
) -> np.ndarray:
    """Uniform samples of the ellipsoid x'Px <= level (default: domain level gamma_x+gamma_f).

    Draws from the unit ball and whitens through the Cholesky factor of
    P^{-1}, so the sample is exactly uniform on the target ellipsoid.
    """
    lvl = (scbf.gamma_x + gamma_f) if level is None else level
    n = scbf.n
    if lvl <= 0:
        return np.zeros((n_samples, n))
    W = np.linalg.cholesky(scbf.E)
    d = rng.normal(size=(n_samples, n))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = rng.random(n_samples) ** (1.0 / n)
    return np.sqrt(lvl) * (r[:, None] * d) @ W.T


@dataclass
class VerificationReport:
    """Sampled-condition residuals; the set passes iff every residual <= tol."""

    passed: bool
    tol: float
    n_samples: int
    residuals: dict = field(default_factory=dict)
    structural_violations: list = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"verification: {'PASS' if self.passed else 'FAIL'} (tol {self.tol:.2e})"]
        for name, val in self.residuals.items():
            lines.append(f"  {name}: max residual {val:+.3e}")
        for s in self.structural_violations:
            lines.append(f"  structural: {s}")
        return "\n".join(lines)


def _structural_check(scbfs: SCBFSet, network: NetworkModel, tol: float) -> list:
    out = []
    if scbfs.variant != ELLIPSOIDAL:
        return out
    L = network.agent_count
    for l in range(L):
        a = scbfs.agents[l]
        if a.rho <= 0:
            out.append(f"agent {l}: rho must be positive (got {a.rho})")
        row = sum(a.b[j] for j in network.topology.neighbors(l))
        if row > a.rho + tol:
            out.append(f"agent {l}: row sum of b exceeds rho ({row:.3e} > {a.rho:.3e})")
        if 1.0 - a.rho + a.b[l] < -tol:
            out.append(f"agent {l}: 1 - rho + b[l][l] negative")
        for j in network.topology.neighbors(l):
            if j != l and a.b[j] < -tol:
                out.append(f"agent {l}: b[{l}][{j}] negative")
    for j in range(L):
        col = sum(
            scbfs.agents[l].b[j] for l in range(L) if j in network.topology.neighbors(l)
        )
        if col > tol:
            out.append(f"agent {j}: column sum of b positive ({col:.3e})")
    return out


def verify_scbf_sampled(
    scbfs: SCBFSet,
    network: NetworkModel,
    n_samples: int = 10000,
    tol: float = 1e-6,
    seed: int = 0,
) -> VerificationReport:
    """Check the barrier-set conditions on random domain samples.

    Conditions checked, with the synthesized feedback as the input
    witness: the relaxed local decrease, invariance of the product of
    safe sets, and nonpositivity of the summed relaxation terms. The
    report carries the worst residual of each condition; the threshold
    is ``tol * max(1, gamma_f)``.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    L = network.agent_count
    if len(scbfs.agents) != L:
        raise DimensionError("barrier set size does not match network")
    rng = np.random.default_rng(seed)
    threshold = tol * max(1.0, scbfs.gamma_f)

    structural = _structural_check(scbfs, network, tol=1e-12)

    dom = [sample_domain(scbfs.agents[l], scbfs.gamma_f, n_samples, rng) for l in range(L)]
    res_decrease = -np.inf
    res_sum = -np.inf
    for k in range(n_samples):
        x = np.concatenate([dom[l][k] for l in range(L)])
        u = terminal_feedback(scbfs, network, x)
        beta_total = 0.0
        for l in range(L):
            a = scbfs.agents[l]
            dyn = network.dynamics[l]
            xN = network.neighbor_state(x, l)
            x_next = dyn.A @ xN + dyn.B @ network.agent_input(u, l)
            beta = eval_beta(scbfs, network, x, l)
            decrease = eval_decrease(scbfs, network, x, l)
            res_decrease = max(
                res_decrease,
                eval_h(a, x_next) - eval_h(a, network.agent_state(x, l)) + decrease - beta,
            )
            beta_total += beta
        res_sum = max(res_sum, beta_total)

    # invariance of the product of safe sets (next state stays at h = 0)
    n_safe = max(1, n_samples // 10)
    safe = [
        sample_domain(scbfs.agents[l], scbfs.gamma_f, n_safe, rng, level=scbfs.agents[l].gamma_x)
        for l in range(L)
    ]
    res_safe = -np.inf
    for k in range(n_safe):
        x = np.concatenate([safe[l][k] for l in range(L)])
        u = terminal_feedback(scbfs, network, x)
        for l in range(L):
            dyn = network.dynamics[l]
            x_next = dyn.A @ network.neighbor_state(x, l) + dyn.B @ network.agent_input(u, l)
            res_safe = max(res_safe, eval_h(scbfs.agents[l], x_next))

    residuals = {
        "relaxed_decrease": float(res_decrease),
        "safe_set_invariance": float(res_safe),
        "relaxation_sum": float(res_sum),
    }
    passed = not structural and all(v <= threshold for v in residuals.values())
    return VerificationReport(
        passed=passed,
        tol=threshold,
        n_samples=n_samples,
        residuals=residuals,
        structural_violations=structural,
    )


# --- serialization (matrices stored row-major as nested lists) ---


def _agent_to_dict(a: AgentSCBF) -> dict:
    d = {"P": a.P.tolist(), "gamma_x": a.gamma_x, "K": a.K.tolist()}
    if a.rho is not None:
        d["rho"] = a.rho
    if a.b is not None:
        d["b"] = {str(j): v for j, v in a.b.items()}
    if a.Gamma is not None:
        d["Gamma"] = a.Gamma.tolist()
    if a.D is not None:
        d["D"] = a.D.tolist()
    return d


def _agent_from_dict(d: dict) -> AgentSCBF:
    return AgentSCBF(
        P=np.array(d["P"]),
        gamma_x=float(d["gamma_x"]),
        K=np.array(d["K"]),
        rho=d.get("rho"),
        b={int(j): float(v) for j, v in d["b"].items()} if "b" in d else None,
        Gamma=np.array(d["Gamma"]) if "Gamma" in d else None,
        D=np.array(d["D"]) if "D" in d else None,
    )


def save_scbf_set(scbfs: SCBFSet, path) -> None:
    payload = {
        "schema": "scbf-set/v1",
        "variant": scbfs.variant,
        "gamma_f": scbfs.gamma_f,
        "vmax_enforced": scbfs.vmax_enforced,
        "agents": [_agent_to_dict(a) for a in scbfs.agents],
    }
    with open(path, "w") as f:
        json.dump(payload, f, indent=1)


def load_scbf_set(path) -> SCBFSet:
    with open(path) as f:
        payload = json.load(f)
    if payload.get("schema") != "scbf-set/v1":
        raise ValueError(f"unsupported barrier file schema: {payload.get('schema')!r}")
    return SCBFSet(
        variant=payload["variant"],
        agents=tuple(_agent_from_dict(d) for d in payload["agents"]),
        gamma_f=float(payload["gamma_f"]),
        vmax_enforced=bool(payload["vmax_enforced"]),
    )
