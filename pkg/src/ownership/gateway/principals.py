"""
Registered principals and their roles.
"""

import threading
from typing import Dict, List, Optional

import structlog
from pydantic import BaseModel, ConfigDict, Field

from ..clock import SimulatedClock
from ..crypto import KeyPair, address_from_public_key, is_hex_id
from ..errors import RejectedError, UnauthorizedError, ValidationFailure
from ..models import Role

logger = structlog.get_logger(__name__)


class Principal(BaseModel):
    """A registered caller; the role is fixed at registration."""

    model_config = ConfigDict(frozen=True)

    address: str
    role: Role
    public_key: str
    display_name: str = ""
    registered_at: int = 0
    metadata: Dict[str, str] = Field(default_factory=dict)


class PrincipalRegistry:
    """Address -> principal; third parties must be registered before any request."""

    def __init__(self, clock: Optional[SimulatedClock] = None):
        self.clock = clock or SimulatedClock()
        self._principals: Dict[str, Principal] = {}
        self._lock = threading.Lock()

    def register(
        self,
        public_key: str,
        role: Role | str,
        display_name: str = "",
        metadata: Optional[Dict[str, str]] = None,
    ) -> Principal:
        if not is_hex_id(public_key):
            raise ValidationFailure("public_key must be 32 hex-encoded bytes")
        try:
            role = Role(role)
        except ValueError:
            raise ValidationFailure(f"unknown role '{role}'")
        address = address_from_public_key(bytes.fromhex(public_key))
        with self._lock:
            existing = self._principals.get(address)
            if existing is not None:
                if existing.role != role:
                    raise RejectedError("principal already registered with another role", address=address)
                return existing
            principal = Principal(
                address=address,
                role=role,
                public_key=public_key,
                display_name=display_name,
                registered_at=self.clock.now(),
                metadata=dict(metadata or {}),
            )
            self._principals[address] = principal
        logger.info("gateway.principal_registered", address=address[:16], role=role.value)
        return principal

    def register_key(self, keypair: KeyPair, role: Role | str, display_name: str = "") -> Principal:
        return self.register(keypair.public_key_hex, role, display_name)

    def get(self, address: str) -> Principal:
        principal = self._principals.get(address)
        if principal is None:
            raise UnauthorizedError("unknown principal", principal=address)
        return principal

    def __contains__(self, address: object) -> bool:
        return address in self._principals

    def principals(self, role: Optional[Role] = None) -> List[Principal]:
        return [
            p
            for _, p in sorted(self._principals.items())
            if role is None or p.role == role
        ]
