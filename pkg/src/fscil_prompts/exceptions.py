"""Exception hierarchy shared across the package."""


class FSCILError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(FSCILError, ValueError):
    """Invalid dimensions, hyperparameters or run configuration."""


class CapacityError(FSCILError, ValueError):
    """A sequence no longer fits the encoder after prompt injection."""


class DataError(FSCILError, ValueError):
    """Malformed inputs: empty class names, bad image arrays, ..."""


class ProtocolError(FSCILError, RuntimeError):
    """The few-shot class-incremental protocol was violated."""


class NumericError(FSCILError, ArithmeticError):
    """A degenerate numeric state, e.g. a zero-norm embedding."""


class InvariantError(FSCILError, RuntimeError):
    """An internal invariant failed (frozen weights changed, ...)."""
