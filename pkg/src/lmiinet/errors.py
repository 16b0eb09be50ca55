"""Exception hierarchy shared by the whole package."""


class LmiiError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LmiiError):
    """Tensor dimensions are incompatible with an operation."""


class ConfigError(LmiiError):
    """A block or network configuration is invalid.

    ``violations`` carries one message per problem so callers can report
    every issue at once instead of failing on the first.
    """

    def __init__(self, message, violations=None):
        super().__init__(message)
        self.violations = list(violations) if violations else [message]


class UsageError(LmiiError):
    """An API was called in an unsupported order or with an unsupported value."""


class DataError(LmiiError):
    """Input data (labels, images) violates its contract."""


class FormatError(LmiiError):
    """A file does not match its expected on-disk format."""


class IntegrityError(LmiiError):
    """A file is structurally valid but fails a length or checksum test."""


class UndefinedMetricError(LmiiError):
    """A metric was requested from a state where it is undefined."""
