"""Coupled linear multi-agent system model.

A network is a set of agents with discrete-time dynamics

    x_l(t+1) = A_l @ x_{N_l}(t) + B_l @ u_l(t)

where N_l is the neighbor set of agent l (always containing l itself)
and x_{N_l} stacks the neighbor states in ascending agent order. State
and input constraints are per-agent polytopes ``H x <= h``.

All containers are immutable after construction and safe to share
across threads.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, TopologyError


def _as_matrix(a) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    m.setflags(write=False)
    return m


def _as_vector(a) -> np.ndarray:
    v = np.asarray(a, dtype=float).reshape(-1)
    v.setflags(write=False)
    return v


@dataclass(frozen=True)
class Topology:
    """Communication graph over agents.

    Neighbor sets are canonicalized to ascending order; this order fixes
    the column layout of every coupled matrix in the package.
    """

    agent_count: int
    neighbor_sets: tuple

    def __post_init__(self):
        if self.agent_count < 1:
            raise TopologyError("need at least one agent")
        if len(self.neighbor_sets) != self.agent_count:
            raise TopologyError("one neighbor set per agent required")
        canon = tuple(tuple(sorted(set(int(j) for j in ns))) for ns in self.neighbor_sets)
        object.__setattr__(self, "neighbor_sets", canon)
        for l, ns in enumerate(canon):
            if l not in ns:
                raise TopologyError(f"agent {l} missing from its own neighbor set")
            for j in ns:
                if not 0 <= j < self.agent_count:
                    raise TopologyError(f"agent {l} references unknown agent {j}")
                if l not in canon[j]:
                    raise TopologyError(
                        f"asymmetric neighbor sets: {j} in N_{l} but {l} not in N_{j}"
                    )
        if not self._connected():
            raise TopologyError("communication graph is not connected")

    def _connected(self) -> bool:
        seen = {0}
        stack = [0]
        while stack:
            l = stack.pop()
            for j in self.neighbor_sets[l]:
                if j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == self.agent_count

    def neighbors(self, l: int) -> tuple:
        return self.neighbor_sets[l]


@dataclass(frozen=True)
class AgentDynamics:
    """One agent's dynamics row: coupled map A (n_l x n_{N_l}) and input map B (n_l x m_l)."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A))
        object.__setattr__(self, "B", _as_matrix(self.B))
        if self.A.shape[0] != self.B.shape[0]:
            raise DimensionError("A and B must have the same number of rows")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class Polytope:
    """Set {z : H z <= h}. Must contain the origin strictly (h > 0)."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", _as_matrix(self.H))
        object.__setattr__(self, "h", _as_vector(self.h))
        if self.H.shape[0] != self.h.shape[0]:
            raise DimensionError("H rows and h length differ")
        if np.any(self.h <= 0):
            raise ValueError("polytope must contain the origin strictly (h > 0)")

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def contains(self, z, tol: float = 0.0) -> bool:
        return bool(np.all(self.H @ np.asarray(z, float) <= self.h + tol))


@dataclass(frozen=True)
class AgentConstraints:
    """State / input polytopes and per-row temporary violation tolerances.

    ``v_max[k]`` bounds how far state-constraint row k may be violated
    during recovery; ``inf`` entries mean no declared tolerance.
    """

    state_poly: Polytope
    input_poly: Polytope
    v_max: np.ndarray = None

    def __post_init__(self):
        if self.v_max is None:
            v = np.full(self.state_poly.rows, np.inf)
        else:
            v = np.asarray(self.v_max, dtype=float).reshape(-1)
        if v.shape[0] != self.state_poly.rows:
            raise DimensionError("v_max must have one entry per state-constraint row")
        if np.any(v < 0):
            raise ValueError("v_max must be nonnegative")
        v.setflags(write=False)
        object.__setattr__(self, "v_max", v)


@dataclass(frozen=True)
class NetworkModel:
    """Validated network: topology + per-agent dynamics and constraints."""

    topology: Topology
    dynamics: tuple
    constraints: tuple
    state_offsets: tuple = field(init=False)
    input_offsets: tuple = field(init=False)

    def __post_init__(self):
        L = self.topology.agent_count
        if len(self.dynamics) != L or len(self.constraints) != L:
            raise DimensionError("dynamics/constraints must be given for every agent")
        dims = [d.n for d in self.dynamics]
        for l in range(L):
            dyn = self.dynamics[l]
            n_neigh = sum(dims[j] for j in self.topology.neighbors(l))
            if dyn.A.shape[1] != n_neigh:
                raise DimensionError(
                    f"agent {l}: A has {dyn.A.shape[1]} columns, neighbor states total {n_neigh}"
                )
            con = self.constraints[l]
            if con.state_poly.dim != dyn.n:
                raise DimensionError(f"agent {l}: state polytope dimension mismatch")
            if con.input_poly.dim != dyn.m:
                raise DimensionError(f"agent {l}: input polytope dimension mismatch")
        object.__setattr__(
            self, "state_offsets", tuple(np.concatenate([[0], np.cumsum(dims)]).tolist())
        )
        mdims = [d.m for d in self.dynamics]
        object.__setattr__(
            self, "input_offsets", tuple(np.concatenate([[0], np.cumsum(mdims)]).tolist())
        )

    @property
    def agent_count(self) -> int:
        return self.topology.agent_count

    @property
    def state_dim(self) -> int:
        return self.state_offsets[-1]

    @property
    def input_dim(self) -> int:
        return self.input_offsets[-1]

    def state_dims(self) -> list:
        return [d.n for d in self.dynamics]

    def input_dims(self) -> list:
        return [d.m for d in self.dynamics]

    def agent_state(self, x: np.ndarray, l: int) -> np.ndarray:
        return np.asarray(x, float)[self.state_offsets[l] : self.state_offsets[l + 1]]

    def agent_input(self, u: np.ndarray, l: int) -> np.ndarray:
        return np.asarray(u, float)[self.input_offsets[l] : self.input_offsets[l + 1]]

    def neighbor_state(self, x: np.ndarray, l: int) -> np.ndarray:
        return np.concatenate([self.agent_state(x, j) for j in self.topology.neighbors(l)])


def build_network(agents, topology: Topology) -> NetworkModel:
    """Assemble and validate a NetworkModel.

    ``agents`` is a sequence of (AgentDynamics, AgentConstraints) pairs,
    index-aligned with the topology.
    """
    dynamics = tuple(a[0] for a in agents)
    constraints = tuple(a[1] for a in agents)
    return NetworkModel(topology=topology, dynamics=dynamics, constraints=constraints)


def step(network: NetworkModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Propagate the global state one step: per agent x_l' = A_l x_{N_l} + B_l u_l."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape != (network.state_dim,):
        raise DimensionError(f"state must have shape ({network.state_dim},)")
    if u.shape != (network.input_dim,):
        raise DimensionError(f"input must have shape ({network.input_dim},)")
    out = np.empty_like(x)
    for l in range(network.agent_count):
        dyn = network.dynamics[l]
        xN = network.neighbor_state(x, l)
        out[network.state_offsets[l] : network.state_offsets[l + 1]] = (
            dyn.A @ xN + dyn.B @ network.agent_input(u, l)
        )
    return out


def selection_matrices(network: NetworkModel, l: int):
    """0/1 selectors (T_l, W_l) with T_l x = x_l and W_l x = x_{N_l} for global x."""
    n = network.state_dim
    T = np.zeros((network.dynamics[l].n, n))
    T[:, network.state_offsets[l] : network.state_offsets[l + 1]] = np.eye(network.dynamics[l].n)
    rows = sum(network.dynamics[j].n for j in network.topology.neighbors(l))
    W = np.zeros((rows, n))
    r = 0
    for j in network.topology.neighbors(l):
        nj = network.dynamics[j].n
        W[r : r + nj, network.state_offsets[j] : network.state_offsets[j + 1]] = np.eye(nj)
        r += nj
    return T, W


def constraint_violation(network: NetworkModel, x: np.ndarray) -> list:
    """Per-agent violation vectors max(0, H x_l - h); all-zero iff x is constraint-admissible."""
    x = np.asarray(x, dtype=float)
    out = []
    for l in range(network.agent_count):
        poly = network.constraints[l].state_poly
        out.append(np.maximum(0.0, poly.H @ network.agent_state(x, l) - poly.h))
    return out


def global_matrices(network: NetworkModel):
    """Dense global (A, B) such that step(x, u) == A @ x + B @ u."""
    n, m = network.state_dim, network.input_dim
    A = np.zeros((n, n))
    Bg = np.zeros((n, m))
    for l in range(network.agent_count):
        dyn = network.dynamics[l]
        r0, r1 = network.state_offsets[l], network.state_offsets[l + 1]
        c = 0
        for j in network.topology.neighbors(l):
            nj = network.dynamics[j].n
            A[r0:r1, network.state_offsets[j] : network.state_offsets[j] + nj] = dyn.A[
                :, c : c + nj
            ]
            c += nj
        Bg[r0:r1, network.input_offsets[l] : network.input_offsets[l + 1]] = dyn.B
    return A, Bg
