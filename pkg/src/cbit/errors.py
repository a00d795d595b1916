"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config problems exit 1, data problems
exit 2 and numeric failures exit 3.
"""


class CbitError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CbitError):
    """Invalid configuration value, flag or file."""


class DataError(CbitError):
    """Malformed or unusable input data."""


class NumericError(CbitError):
    """Non-finite values or other numeric breakdowns."""
