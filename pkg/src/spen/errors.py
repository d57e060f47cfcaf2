"""Exception hierarchy shared by every module."""


class SpenError(Exception):
    """Base class for all package errors."""


class DimensionError(SpenError, ValueError):
    pass


class ConfigurationError(SpenError, ValueError):
    pass


class ContractError(SpenError, ValueError):
    """A documented precondition of an operation was violated."""


class NumericError(SpenError, FloatingPointError):
    """Non-finite values appeared where finite ones are required."""


class InternalConsistencyError(SpenError, RuntimeError):
    pass


class FormatError(SpenError, ValueError):
    """Malformed file contents; ``offset`` is the byte position of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
