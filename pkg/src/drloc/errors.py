"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: configuration problems exit
with 1, data problems with 2 and numerical aborts with 3.
"""


class DrlocError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DrlocError):
    """Invalid configuration: bad shapes, bad config values, misuse of the API."""

    exit_code = 1


class ShapeError(ConfigurationError):
    """Operand shapes incompatible for an operation."""


class DataError(DrlocError):
    """Malformed or missing input data."""

    exit_code = 2


class NumericsError(DrlocError):
    """Non-finite values or a failed numerical check."""

    exit_code = 3
