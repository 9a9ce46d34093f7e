"""Exception hierarchy shared by every r2p module."""


class R2PError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(R2PError, ValueError):
    pass


class EmptyInputError(R2PError, ValueError):
    pass


class UsageError(R2PError):
    pass


class ContractError(R2PError, ValueError):
    pass


class CapacityError(R2PError):
    pass


class ConsistencyError(R2PError):
    pass


class CheckpointError(R2PError):
    pass


class DataError(R2PError):
    """Unreadable or malformed data file."""


class ParseError(DataError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


class NumericalError(R2PError, FloatingPointError):
    """A forward pass or loss produced NaN/Inf.

    ``snapshot`` carries whatever diagnostic context the raiser had.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
