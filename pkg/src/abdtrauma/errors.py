"""Exception hierarchy shared by every pipeline stage."""


class TraumaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(TraumaError, ValueError):
    pass


class ContractError(TraumaError, ValueError):
    """An input violates a documented precondition (shape, range, length)."""


class StorageError(TraumaError, OSError):
    pass


class NumericError(TraumaError, ArithmeticError):
    pass


class DegenerateInputError(TraumaError, ValueError):
    pass


class DegenerateMaskError(TraumaError, ValueError):
    """Raised for an all-zero mask.

    ``fallback`` is True when the caller may legitimately fall back to the
    full, uncropped volume.
    """

    def __init__(self, message: str, fallback: bool = True):
        super().__init__(message)
        self.fallback = fallback
