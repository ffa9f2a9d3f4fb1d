"""Exception hierarchy shared by every vaeloop module."""


class VaeLoopError(Exception):
    """Base class for all library errors."""


class DimensionError(VaeLoopError, ValueError):
    """Operands have incompatible shapes."""


class RankError(VaeLoopError, ValueError):
    """A tensor has the wrong number of axes (e.g. a non-scalar loss)."""


class InputTooShortError(VaeLoopError, ValueError):
    """A sequence is shorter than an operation can accept."""


class EmptySequenceError(VaeLoopError, ValueError):
    """A sequence has zero length where at least one element is required."""


class NonFiniteError(VaeLoopError, FloatingPointError):
    """NaN or Inf encountered where only finite values are allowed."""


class DivergenceError(NonFiniteError):
    """Training produced a non-finite loss or gradient."""


class FormatError(VaeLoopError):
    """A binary or text file does not match its declared format.

    ``offset`` is the byte offset (or line number for text formats) at which
    the problem was detected, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(VaeLoopError, ValueError):
    """Invalid configuration value or unknown configuration key."""
