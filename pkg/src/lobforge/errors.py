"""Exception hierarchy shared across the package.

Each class maps to one CLI exit code (see cli.py): config errors exit 2,
data errors 3, training divergence 4, internal invariant violations 5.
"""


class LobforgeError(Exception):
    """Base class for all package errors."""


class ConfigError(LobforgeError):
    """Invalid configuration value or config-file schema violation."""


class DataError(LobforgeError):
    """Malformed or contract-violating input data."""


class DivergenceError(LobforgeError):
    """Training produced a non-finite loss."""


class InvariantError(LobforgeError):
    """An internal consistency check failed; indicates a bug."""
