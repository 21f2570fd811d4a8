"""Exception types shared across the package."""


class SimredError(Exception):
    """Base class for all package errors."""


class DimensionError(SimredError, ValueError):
    """Argument shapes do not match the system dimensions."""


class IntegrationError(SimredError):
    """The stiff integrator could not reach the end of the interval.

    Attributes
    ----------
    t : float
        Last time the integrator reached successfully.
    """

    def __init__(self, message, t):
        super().__init__(f"{message} (reached t={t:.6g})")
        self.t = t


class ConvergenceError(SimredError):
    """An iterative solver stopped without meeting its tolerance.

    Attributes
    ----------
    best : object
        Best iterate found before giving up.
    """

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class SensitivityError(SimredError):
    """The stationarity system is numerically singular at a manifold point."""


class IllConditionedError(SimredError):
    """An RBF interpolation matrix is too badly conditioned to solve."""

    def __init__(self, message, conditions=None):
        super().__init__(message)
        self.conditions = conditions or {}


class OutOfDomainError(SimredError, ValueError):
    """Query point outside the region covered by an interpolant."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class EvaluationError(SimredError):
    """A model or constraint evaluation failed at a trial point.

    Carries the shooting interval and query point when raised from a
    transcription so failures can be located.
    """

    def __init__(self, message, interval=None, point=None):
        loc = ""
        if interval is not None:
            loc = f" [interval {interval}]"
        super().__init__(message + loc)
        self.interval = interval
        self.point = point


class TableBuildError(SimredError):
    """Too many grid nodes failed during an offline table sweep."""

    def __init__(self, message, failures):
        super().__init__(message)
        self.failures = failures
