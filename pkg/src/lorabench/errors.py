"""Exception hierarchy shared across the package."""


class LorabenchError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(LorabenchError, ValueError):
    """Tensor shapes are inconsistent for the requested operation."""


class DomainError(LorabenchError, ValueError):
    """A numeric argument is outside its valid domain."""


class InputError(LorabenchError, ValueError):
    """User-provided data (tokens, class names, ...) is invalid."""


class StateError(LorabenchError, RuntimeError):
    """Operation invoked in an invalid object state (double merge, ...)."""


class FormatError(LorabenchError, ValueError):
    """A serialized artifact (checkpoint, manifest, CSV) is malformed."""
