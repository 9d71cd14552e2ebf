"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
NumericalError -> 3, VolumeFormatError / OSError -> 4.
"""


class QsmlabError(Exception):
    """Base class for package-specific failures."""


class ConfigError(QsmlabError):
    """Invalid configuration file, flag value, or spec parameter."""


class VolumeFormatError(QsmlabError):
    """Corrupt, truncated, or unrecognized .qvol file."""


class NumericalError(QsmlabError):
    """Non-finite values or divergence in a numerical routine."""
