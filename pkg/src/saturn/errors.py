"""Typed error hierarchy shared by every subsystem.

Each error carries a stable machine-readable ``code`` so the HTTP layer and
the CLI can map failures without string matching.
"""

from __future__ import annotations


class SaturnError(Exception):
    """Base class for all platform errors."""

    code = "error"
    http_status = 500

    def __init__(self, message: str = ""):
        super().__init__(message or self.__class__.__name__)
        self.message = message or self.__class__.__name__


class InvalidInput(SaturnError):
    code = "invalid-input"
    http_status = 400


class NotFound(SaturnError):
    code = "not-found"
    http_status = 404


class Conflict(SaturnError):
    code = "conflict"
    http_status = 409


class Forbidden(SaturnError):
    code = "forbidden"
    http_status = 403


class Unauthorized(SaturnError):
    code = "unauthorized"
    http_status = 401


class InvalidTransition(SaturnError):
    code = "invalid-transition"
    http_status = 409


class GateFailed(SaturnError):
    code = "gate-failed"
    http_status = 409


class NotReady(SaturnError):
    code = "not-ready"
    http_status = 409


class RebuildRequired(SaturnError):
    code = "rebuild-required"
    http_status = 409


class IntegrityError(SaturnError):
    code = "integrity-error"
    http_status = 422


class IoError(SaturnError):
    code = "io-error"
    http_status = 500


class Unavailable(SaturnError):
    code = "unavailable"
    http_status = 503


#: code -> class, used by clients to re-raise typed errors from API bodies.
ERRORS_BY_CODE = {
    cls.code: cls
    for cls in [
        InvalidInput,
        NotFound,
        Conflict,
        Forbidden,
        Unauthorized,
        InvalidTransition,
        GateFailed,
        NotReady,
        RebuildRequired,
        IntegrityError,
        IoError,
        Unavailable,
    ]
}
