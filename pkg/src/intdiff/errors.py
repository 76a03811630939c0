"""Exception types shared across the package."""


class IntdiffError(Exception):
    """Base class for all package errors."""


class StateSpaceError(IntdiffError):
    """Evaluation requested outside the open state interval."""


class NotErgodicError(IntdiffError):
    """Speed density is not integrable; no stationary law exists."""


class DegeneratePredictorError(IntdiffError):
    """Predictor function has (numerically) zero stationary variance."""


class BoundaryDegeneracyError(IntdiffError):
    """Potential derivative is nonfinite at the truncated grid edge."""


class PreconditionError(IntdiffError):
    """An operation's documented precondition was violated."""


class SimulationDivergedError(IntdiffError):
    """Path left the finite range; carries the offending step index."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class DiagnosticsUnreliableError(IntdiffError):
    """Too few samples per bin for a trustworthy regression diagnostic."""


class NoRootError(IntdiffError):
    """No start of the multistart solver produced a converged root."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class InvalidStudyError(IntdiffError):
    """Too many replications failed to converge; carries the counts."""

    def __init__(self, message, failed=None, total=None):
        super().__init__(message)
        self.failed = failed
        self.total = total


class ConfigError(IntdiffError):
    """Malformed or constraint-violating run configuration."""
