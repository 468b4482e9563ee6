"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes, so raising the right class
matters: ConfigError -> 1, DataError -> 2, NumericalError -> 3.
"""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or missing input data."""


class NumericalError(RuntimeError):
    """Non-finite values or numerically impossible requests."""
