"""Shared exception types, kept separate to avoid import cycles."""


class ConfigError(ValueError):
    """Bad configuration contents (unknown key, wrong type, bad value)."""


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""


class PreconditionError(RuntimeError):
    """An operation's runtime precondition is not met."""
