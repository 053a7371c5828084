class ShapeError(ValueError):
    """Raised when tensor extents are incompatible with an operation."""


class DomainError(ValueError):
    """Raised in strict mode when loss inputs fall outside their valid range."""


class MissingGradientError(RuntimeError):
    """Raised when an optimizer step finds a trainable parameter without a gradient."""


class NonFiniteError(FloatingPointError):
    """Raised by debug-mode checks when a forward value is NaN or infinite."""
