"""Exception types shared across the package."""


class GameValidationError(ValueError):
    """A game, policy or data file violates a structural invariant."""


class UndefinedConditionalError(ValueError):
    """A conditional was requested on a zero-probability conditioning event."""

    def __init__(self, message, events=()):
        super().__init__(message)
        self.events = list(events)


class ConvergenceError(RuntimeError):
    """Power iteration did not reach the requested tolerance."""

    def __init__(self, message, residual=float("nan")):
        super().__init__(message)
        self.residual = residual


class OptimizerAbort(RuntimeError):
    """An optimizer produced a non-finite objective or loss."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""
