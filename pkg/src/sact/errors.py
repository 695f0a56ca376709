"""Error taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 2, data problems with 3, and numerical failures with 4. Library
callers can catch the same classes directly.
"""


class SactError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(SactError):
    """A configuration value or combination of values is invalid."""


class DataError(SactError):
    """Input data is malformed, missing, or inconsistent with the model."""


class PackFormatError(DataError):
    """A feature pack file violates the binary format contract."""
