"""Exception hierarchy shared across the toolkit.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, numerical failures with 4.
"""


class HistodiffError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HistodiffError):
    """Invalid or inconsistent configuration (bad flag, bad config file)."""


class DataError(HistodiffError):
    """Malformed, missing, or insufficient input data."""


class InsufficientTissueError(DataError):
    """Too few stained pixels to estimate a stain profile."""


class NumericError(HistodiffError):
    """A numerical routine produced non-finite or indefinite results."""
