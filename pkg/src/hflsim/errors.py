"""Shared exception types."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class InvalidStateError(RuntimeError):
    """An operation was applied to an object in the wrong state."""


class ConfigError(ValueError):
    """An experiment config file failed strict validation."""


class DataFormatError(ValueError):
    """A dataset snapshot file is malformed or internally inconsistent."""
