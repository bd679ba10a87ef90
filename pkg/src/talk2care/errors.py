"""Shared exception types.

Every error raised on purpose by this package derives from Talk2CareError,
so callers (CLI, API) can map them to exit codes and HTTP statuses in one
place.
"""


class Talk2CareError(Exception):
    """Base class for errors raised by this package."""


class ValidationError(Talk2CareError):
    """A domain value failed validation. Carries the offending field name."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class InvariantViolation(Talk2CareError):
    """A session or record broke a structural invariant."""


class NotFoundError(Talk2CareError):
    """Lookup by id found nothing."""


class ConflictError(Talk2CareError):
    """The operation collides with existing state (duplicate mark-done, etc.)."""


class LifecycleError(ConflictError):
    """The session is in the wrong status for this operation."""


class PreconditionError(Talk2CareError):
    """An operation was called with arguments that violate its contract."""


class ConfigurationError(Talk2CareError):
    """Missing or malformed configuration (env vars, template files, keys)."""
