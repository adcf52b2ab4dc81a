"""Exception types shared across the package.

The CLI maps these to exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4.
"""


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigError(ValueError):
    """A configuration value violates its invariants."""


class DataError(Exception):
    """A dataset or file on disk is missing or malformed."""


class NumericError(RuntimeError):
    """A computation produced non-finite values."""
