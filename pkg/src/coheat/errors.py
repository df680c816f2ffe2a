"""Exception types shared across the package.

Exit-code mapping for the CLI: ConfigError -> 2 (usage), DataError -> 3,
NumericalError -> 4.
"""


class CoheatError(Exception):
    """Base class for all package errors."""


class ConfigError(CoheatError):
    """Invalid configuration or argument values."""


class DataError(CoheatError):
    """Malformed, inconsistent, or insufficient input data."""


class NumericalError(CoheatError):
    """Numerical failure: non-finite values, collapsed embeddings, rejected steps."""
