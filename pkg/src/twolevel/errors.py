"""Exception types raised across the package."""


class TwoLevelError(Exception):
    """Base class for all package errors."""


class InvalidRateFunction(TwoLevelError, ValueError):
    pass


class InvalidParameters(TwoLevelError, ValueError):
    pass


class GridMismatch(TwoLevelError, ValueError):
    pass


class AbsorbingState(TwoLevelError):
    """Raised when a step is requested from an absorbing IBM state."""


class DegenerateWeights(TwoLevelError):
    """All Monte Carlo weights (or survivors) vanished."""


class PrecisionLoss(TwoLevelError):
    """Mass underflow during a normalized evolution."""


class DegenerateTruncation(PrecisionLoss):
    pass


class ConvergenceFailure(TwoLevelError):
    def __init__(self, message, gap_estimate=None):
        super().__init__(message)
        self.gap_estimate = gap_estimate


class RegimeHypothesisViolated(TwoLevelError, ValueError):
    pass


class WindowTooLate(TwoLevelError):
    pass


class UnsupportedRateShape(TwoLevelError, ValueError):
    pass


class ConfigError(TwoLevelError, ValueError):
    """Config validation failure; ``path`` locates the offending field."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
