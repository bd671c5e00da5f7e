"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class FormatError(ValueError):
    """Base class for feature-file format problems."""


class BadMagicError(FormatError):
    """File does not start with the expected magic tag."""


class VersionMismatchError(FormatError):
    """File carries a format version this reader does not understand."""


class TruncatedFileError(FormatError):
    """File ends before the payload declared in its header."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values."""
