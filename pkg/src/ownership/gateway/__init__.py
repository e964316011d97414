"""
Restrictive API surface: signed envelopes, role-based authorization and audit.
"""

from .app import create_app, serve
from .audit import AuditLogger
from .authorization import ROLE_MATRIX, Decision, authorize
from .envelopes import EnvelopeSigner, EnvelopeVerifier, RequestEnvelope, sign_envelope
from .principals import Principal, PrincipalRegistry
from .service import OPERATIONS, Gateway, register_operation

__all__ = [
    "AuditLogger",
    "Decision",
    "EnvelopeSigner",
    "EnvelopeVerifier",
    "Gateway",
    "OPERATIONS",
    "Principal",
    "PrincipalRegistry",
    "RequestEnvelope",
    "ROLE_MATRIX",
    "authorize",
    "create_app",
    "register_operation",
    "serve",
    "sign_envelope",
]
