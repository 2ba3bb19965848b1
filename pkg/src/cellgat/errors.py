"""Exception types shared across the package.

Each maps to a CLI exit code: ConfigError -> 2, DataError -> 3,
NumericalError -> 4. Programming-contract violations (bad shapes,
out-of-range indices) raise plain ValueError/IndexError instead.
"""


class CellgatError(Exception):
    """Base class for errors with a defined CLI exit code."""

    exit_code = 1


class ConfigError(CellgatError):
    """Invalid configuration: bad hyperparameter, malformed config file."""

    exit_code = 2


class DataError(CellgatError):
    """Invalid input data: parse failures, inconsistent tables, bad labels."""

    exit_code = 3


class NumericalError(CellgatError):
    """Numerical failure: divergence, non-finite values where finite required."""

    exit_code = 4
