"""Exception types shared across the package."""


class HistfError(Exception):
    """Base class for all package errors."""


class ShapeError(HistfError, ValueError):
    pass


class DomainError(HistfError, ValueError):
    pass


class PartitionError(HistfError, ValueError):
    pass


class ConfigError(HistfError, ValueError):
    pass


class DataError(HistfError, IOError):
    pass


class NumericalError(HistfError, ArithmeticError):
    """Raised when a computation produces non-finite values."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step
