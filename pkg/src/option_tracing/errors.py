"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: usage problems exit 2, DataError exits 3,
NumericError exits 4.
"""


class OptionTracingError(Exception):
    """Base class for all errors raised by this package."""


class DataError(OptionTracingError):
    """Malformed input rows, integrity violations, or unknown ids."""


class ConfigError(OptionTracingError):
    """Invalid or inconsistent configuration (treated as a usage error)."""


class ShapeError(OptionTracingError):
    """Shape-incompatible operands passed to a tensor primitive."""


class NumericError(OptionTracingError):
    """Non-finite values or failed numeric verification."""
