"""
Exception hierarchy shared by every plane.

Deny outcomes that are part of a protocol (authorization decisions, consent,
resolution outcomes) are values, not exceptions.
"""

from typing import Any, Dict, Optional


class OwnershipError(Exception):
    """Base error carrying a stable machine-readable code."""

    code = "error"
    http_status = 400

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def to_dict(self) -> Dict[str, Any]:
        body: Dict[str, Any] = {"error": self.code, "detail": self.message}
        if self.details:
            body["context"] = self.details
        return body


class NotFoundError(OwnershipError):
    code = "not_found"
    http_status = 404


class RejectedError(OwnershipError):
    """A well-formed request that violates a precondition."""

    code = "rejected"
    http_status = 409


class ValidationFailure(RejectedError):
    code = "invalid"
    http_status = 422


class UnauthorizedError(OwnershipError):
    code = "unauthorized"
    http_status = 401


class ReplayDetectedError(UnauthorizedError):
    code = "replay_detected"


class ForbiddenError(OwnershipError):
    code = "forbidden"
    http_status = 403


class ConfigurationError(OwnershipError):
    code = "configuration_error"
    http_status = 500


class ScenarioError(OwnershipError):
    """Malformed scenario file; ``line`` is set for JSON syntax errors."""

    code = "scenario_error"

    def __init__(self, message: str, line: Optional[int] = None, **details: Any):
        super().__init__(message, **details)
        self.line = line


class InjectedFault(OwnershipError):
    """Raised by fault-injection hooks between saga steps."""

    code = "injected_fault"
    http_status = 500

    def __init__(self, boundary: str):
        super().__init__(f"fault injected at {boundary}", boundary=boundary)
        self.boundary = boundary
