"""Exception hierarchy shared across the package.

The CLI maps NumericError to exit code 3 and every other CogradError
(plus OSError) to exit code 2.
"""


class CogradError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CogradError, ValueError):
    """Tensor shapes do not satisfy an operation's contract."""


class NumericError(CogradError, ArithmeticError):
    """A computation produced or would produce a non-finite value."""


class ContractError(CogradError, ValueError):
    """An operation was called in a way its contract forbids."""


class InputError(CogradError, ValueError):
    """User-supplied data violates a precondition (e.g. empty token list)."""


class TokenIndexError(CogradError, IndexError):
    """A token, label or row index is out of range."""


class ConfigError(CogradError, ValueError):
    """Invalid configuration value or impossible run specification."""


class FormatError(CogradError, ValueError):
    """A file does not conform to its documented on-disk format."""
