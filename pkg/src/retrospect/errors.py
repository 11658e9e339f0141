"""Common error base so callers (and the CLI) can catch pipeline faults uniformly."""


class RetrospectError(Exception):
    """Base class for all errors raised by this package."""
