"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: ValidationError -> 1,
DataFormatError/OSError -> 2, NumericError -> 3.
"""


class ClimError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(ClimError, ValueError):
    """Bad arguments, config values, or violated preconditions."""


class DataFormatError(ClimError, ValueError):
    """Malformed on-disk data. `code` identifies the failure class."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class NumericError(ClimError, ArithmeticError):
    """Non-finite or degenerate values where finite math was required."""


class StaleModelError(ClimError, RuntimeError):
    """A cluster model was used against a bank from a different refresh."""
