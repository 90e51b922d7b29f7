"""Exception hierarchy shared across the package."""


class RobustLeakError(Exception):
    """Base class for all package errors."""


class InputError(RobustLeakError, ValueError):
    """Raised when an argument violates an operation's preconditions."""


class NumericError(RobustLeakError, ArithmeticError):
    """Raised on non-finite intermediate values."""


class ParseError(RobustLeakError, ValueError):
    """Raised when a data file contains a malformed record."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(RobustLeakError, ValueError):
    """Raised when parsed records are individually valid but mutually inconsistent."""


class FormatError(RobustLeakError, ValueError):
    """Raised when a binary file does not carry the expected magic number."""


class ConfigError(RobustLeakError, ValueError):
    """Raised when an experiment configuration is invalid."""
