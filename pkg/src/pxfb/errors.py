"""Exception types raised across the toolkit."""


class PxfbError(Exception):
    """Base class for all toolkit errors."""


class DomainError(PxfbError, ValueError):
    """Parameters outside the admissible range (e.g. ``p_min <= 1``)."""


class GradientDegenerateError(PxfbError, ArithmeticError):
    """A nondivergence expansion was requested where the gradient vanishes."""

    def __init__(self, message, points=None):
        super().__init__(message)
        self.points = points


class GridMismatchError(PxfbError, ValueError):
    """Two grid functions live on different lattices."""


class NonConvergenceError(PxfbError, RuntimeError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=float("nan"), iterations=0, partial=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations
        self.partial = partial


class OutOfAnnulusError(PxfbError, ValueError):
    """A barrier was evaluated outside the annulus where it is defined."""


class NoTouchError(PxfbError, RuntimeError):
    """The contact point of a touching test sits on the neighbourhood boundary."""


class NotOnFreeBoundaryError(PxfbError, ValueError):
    """A free boundary check was requested away from the extracted interface."""


class PreconditionError(PxfbError, ValueError):
    """An input violates the stated hypothesis of a check."""


class BallOutOfDomainError(PxfbError, ValueError):
    """A measurement ball is not contained in the grid box."""


class ResolutionExhaustedError(PxfbError, RuntimeError):
    """Rescaling went below the resolvable scale of the grid."""


class InsufficientSamplesError(PxfbError, ValueError):
    """Too few samples for a regression."""


class ConfigError(PxfbError, ValueError):
    """Configuration file could not be parsed or validated."""
