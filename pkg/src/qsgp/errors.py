"""Exception types shared across the package."""


class QSGPError(Exception):
    """Base class for package errors."""


class InvalidState(QSGPError):
    """A model or running quantity is not in a usable state."""


class UnsupportedOperation(QSGPError):
    """The requested operation is not defined for this configuration."""


class NumericError(QSGPError, ArithmeticError):
    """A factorization or solve failed."""


class DataError(QSGPError, ValueError):
    """Input data or a model file could not be used."""
