"""Exception hierarchy shared across the package."""


class BarrierFilterError(Exception):
    """Base class for all package errors."""


class ContractViolation(BarrierFilterError, ValueError):
    """An input broke a documented precondition (shape, sign, range)."""


class RejectionFailure(BarrierFilterError):
    """The rejection sampler exhausted its proposal budget."""

    def __init__(self, attempts: int):
        super().__init__(f"no proposal accepted after {attempts} attempts")
        self.attempts = attempts


class IntegrationError(BarrierFilterError, FloatingPointError):
    """The SDE integrator produced a non-finite drift."""

    def __init__(self, t: float):
        super().__init__(f"non-finite drift at t={t!r}")
        self.t = t


class DegeneracyError(BarrierFilterError, FloatingPointError):
    """Every importance weight underflowed to zero."""


class InsufficientDecayError(BarrierFilterError, ValueError):
    """A curve does not decay enough above its floor to be fitted."""


class NormalizationError(BarrierFilterError, ValueError):
    """A normalising constant is zero (e.g. an all-zero truth sequence)."""
