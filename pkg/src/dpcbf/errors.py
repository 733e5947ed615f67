"""Exception types shared across the package."""


class DpcbfError(Exception):
    """Base class for package errors."""


class DimensionError(DpcbfError):
    """Matrix or vector dimensions are inconsistent with the network."""


class TopologyError(DpcbfError):
    """Neighbor sets violate self-inclusion, symmetry, or connectivity."""


class SolverFailure(DpcbfError):
    """A convex solve failed for numerical reasons (not infeasibility)."""


class InfeasibleProblem(DpcbfError):
    """A convex problem was reported infeasible."""


class SynthesisInfeasible(DpcbfError):
    """Barrier synthesis is infeasible for the given network.

    ``agent`` carries the index of a violating agent block when one
    could be identified by a decoupled probe, else None.
    """

    def __init__(self, message, agent=None):
        super().__init__(message)
        self.agent = agent


class FilterInfeasible(InfeasibleProblem):
    """The frozen-slack safety filter has an empty feasible set.

    Raised when the frozen slacks do not match the state the recovery
    problem was solved at, or when all slacks are pinned to zero and the
    state is outside the recoverable-by-hard-constraints region.
    """


class GuardError(DpcbfError):
    """A safety guard refused to run (e.g. missing violation-bound synthesis)."""
