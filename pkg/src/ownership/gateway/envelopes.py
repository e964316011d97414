"""
Signed request envelopes.

Every service call is an envelope ``{principal, nonce, operation, params,
signature}``. The signature is Ed25519 over the canonical JSON of the other
four fields; nonces are a strictly increasing counter per principal.
"""

import threading
from typing import Any, Dict, Optional

import structlog
from pydantic import BaseModel, Field

from ..canonical import canonical_json
from ..crypto import KeyPair, verify_signature
from ..errors import ReplayDetectedError, UnauthorizedError
from .principals import Principal, PrincipalRegistry

logger = structlog.get_logger(__name__)


class RequestEnvelope(BaseModel):
    principal: str
    nonce: int = Field(..., ge=1)
    operation: str
    params: Dict[str, Any] = Field(default_factory=dict)
    signature: str = ""

    def signing_bytes(self) -> bytes:
        return canonical_json(
            {
                "principal": self.principal,
                "nonce": self.nonce,
                "operation": self.operation,
                "params": self.params,
            }
        )


def sign_envelope(
    keypair: KeyPair,
    operation: str,
    params: Optional[Dict[str, Any]],
    nonce: int,
) -> RequestEnvelope:
    envelope = RequestEnvelope(
        principal=keypair.address,
        nonce=nonce,
        operation=operation,
        params=dict(params or {}),
    )
    return envelope.model_copy(update={"signature": keypair.sign_hex(envelope.signing_bytes())})


class EnvelopeSigner:
    """Client side: signs envelopes with an auto-incrementing nonce."""

    def __init__(self, keypair: KeyPair, start_nonce: int = 0):
        self.keypair = keypair
        self._nonce = start_nonce

    @property
    def address(self) -> str:
        return self.keypair.address

    def sign(self, operation: str, params: Optional[Dict[str, Any]] = None) -> RequestEnvelope:
        self._nonce += 1
        return sign_envelope(self.keypair, operation, params, self._nonce)


class EnvelopeVerifier:
    """Server side: checks the signature and the per-principal nonce."""

    def __init__(self, registry: PrincipalRegistry):
        self.registry = registry
        self._last_nonce: Dict[str, int] = {}
        self._lock = threading.Lock()

    def authenticate(self, envelope: RequestEnvelope) -> Principal:
        principal = self.registry.get(envelope.principal)
        if not envelope.signature or not verify_signature(
            principal.public_key, envelope.signature, envelope.signing_bytes()
        ):
            raise UnauthorizedError("invalid request signature", principal=envelope.principal)
        with self._lock:
            last = self._last_nonce.get(principal.address, 0)
            if envelope.nonce <= last:
                raise ReplayDetectedError(
                    "nonce already used", principal=principal.address, nonce=envelope.nonce, last_nonce=last
                )
            self._last_nonce[principal.address] = envelope.nonce
        return principal

    def last_nonce(self, address: str) -> int:
        return self._last_nonce.get(address, 0)
