"""Exception types shared across the package."""


class KcurvError(Exception):
    """Base class for all package errors."""


class ContractError(KcurvError):
    """An argument violates an operation's contract (shape/range mismatch)."""


class CapabilityError(KcurvError):
    """Requested feature outside supported range (dimension, oracle order)."""


class DegenerateMetricError(KcurvError):
    """Metric matrix is singular or not positive definite."""


class OutOfDomainError(KcurvError):
    """A geodesic left the declared chart domain."""

    def __init__(self, message, exit_time=None):
        super().__init__(message)
        self.exit_time = exit_time


class GraphConditionError(KcurvError):
    """Perturbation w violates the radial-graph condition."""


class SolvabilityError(KcurvError):
    """Helmholtz right-hand side has a nonzero kernel component."""

    def __init__(self, message, kernel_norm=None):
        super().__init__(message)
        self.kernel_norm = kernel_norm


class DegenerateLeafError(KcurvError):
    """Per-node first fundamental form is singular."""


class AccuracyError(KcurvError):
    """A computed quantity failed its internal accuracy monitor."""


class NonConvergenceError(KcurvError):
    """An iterative solve exceeded its iteration budget."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class OuterSolveError(KcurvError):
    """Center solve found no kernel-residual zero in the search ball."""

    def __init__(self, message, samples=None):
        super().__init__(message)
        self.samples = samples or []


class ConfigError(KcurvError):
    """Run configuration failed to parse or validate."""
