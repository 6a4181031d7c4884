class PromalignError(Exception):
    """Base class for all errors raised by this package."""


class InputError(PromalignError, ValueError):
    """Malformed or out-of-contract input data."""


class ConfigError(PromalignError, ValueError):
    """Invalid or inconsistent configuration."""


class ExternalError(PromalignError, RuntimeError):
    """A pluggable backend (detector, tagger) failed. Callers may retry."""

    retriable = True
