"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigurationError -> 1,
DataError -> 2, NumericError -> 3.
"""


class TraumaSynthError(Exception):
    """Base class for package errors."""

    exit_code = 3


class ConfigurationError(TraumaSynthError):
    """Invalid configuration value or flag combination."""

    exit_code = 1


class DataError(TraumaSynthError):
    """Missing, malformed or inconsistent input data."""

    exit_code = 2


class NumericError(TraumaSynthError):
    """Non-finite values or diverging optimization."""

    exit_code = 3
