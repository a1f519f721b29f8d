"""Exception types shared across modules."""


class AdmissibilityError(ValueError):
    """A strategy or parameter lies outside its admissible set."""


class ConditionViolation(ValueError):
    """An integrability condition on the consumption weight fails."""

    def __init__(self, message, condition=None, time=None):
        super().__init__(message)
        self.condition = condition
        self.time = time


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None, partial=None):
        super().__init__(message)
        self.residual = residual
        self.partial = partial


class UnboundedSaddleError(RuntimeError):
    """The saddle problem has no finite maximizer."""
