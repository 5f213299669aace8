"""Exception hierarchy shared by every ropnet module."""


class RopNetError(Exception):
    """Base class for all library errors."""


class ShapeError(RopNetError, ValueError):
    pass


class ParameterError(RopNetError, ValueError):
    pass


class NumericError(RopNetError, ArithmeticError):
    pass


class CapabilityError(RopNetError):
    """Raised when a graph contains something an engine cannot execute."""


class FormatError(RopNetError):
    """Malformed on-disk data (model container, PPM, CSV)."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(RopNetError):
    """Dataset content violates a precondition (empty split, bad group...)."""


class ValidationError(DataError, ValueError):
    pass


class SplitError(DataError):
    pass
