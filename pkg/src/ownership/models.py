"""
Data models shared across planes.
"""
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Role(str, Enum):
    """Principal roles known to the gateway."""
    CUSTODIAN = "custodian"
    DATA_OWNER = "data_owner"
    THIRD_PARTY = "third_party"
    ADMIN = "admin"


class OwnershipState(str, Enum):
    CUSTODIAN_HELD = "custodian_held"
    CLAIMED_WEAK_LINKED = "claimed_weak_linked"
    CLAIMED_WEAK_REVOKED = "claimed_weak_revoked"
    CLAIMED_STRONG = "claimed_strong"


# Reachable transitions of the ownership state machine.
ALLOWED_TRANSITIONS = frozenset(
    {
        (OwnershipState.CUSTODIAN_HELD, OwnershipState.CLAIMED_WEAK_LINKED),
        (OwnershipState.CLAIMED_WEAK_LINKED, OwnershipState.CLAIMED_WEAK_REVOKED),
        (OwnershipState.CLAIMED_WEAK_REVOKED, OwnershipState.CLAIMED_WEAK_LINKED),
        (OwnershipState.CLAIMED_WEAK_LINKED, OwnershipState.CLAIMED_STRONG),
        (OwnershipState.CLAIMED_WEAK_REVOKED, OwnershipState.CLAIMED_STRONG),
    }
)


class OutcomeKind(str, Enum):
    IDENTIFIED = "identified"
    CONSENT_PENDING = "consent_pending"
    DENIED = "denied"


class DenyReason(str, Enum):
    FLAG_OFF = "flag_off"
    LINK_BROKEN = "link_broken"
    OWNER_DENIED = "owner_denied"
    UNAUTHORIZED = "unauthorized"
    CLAIMED = "claimed"


class ResolutionOutcome(BaseModel):
    """Result of resolving a contract address to identifying information."""

    model_config = ConfigDict(frozen=True)

    outcome: OutcomeKind
    payload: Optional[Dict[str, str]] = None
    request_id: Optional[str] = None
    reason: Optional[DenyReason] = None

    @classmethod
    def identified(cls, payload: Dict[str, str]) -> "ResolutionOutcome":
        return cls(outcome=OutcomeKind.IDENTIFIED, payload=dict(payload))

    @classmethod
    def pending(cls, request_id: str) -> "ResolutionOutcome":
        return cls(outcome=OutcomeKind.CONSENT_PENDING, request_id=request_id)

    @classmethod
    def denied(cls, reason: DenyReason) -> "ResolutionOutcome":
        return cls(outcome=OutcomeKind.DENIED, reason=reason)

    @property
    def is_identified(self) -> bool:
        return self.outcome == OutcomeKind.IDENTIFIED


class TumbleReceipt(BaseModel):
    """Private receipt of one tumble batch, delivered to the requester only."""

    model_config = ConfigDict(frozen=True)

    batch_id: int
    old_id: str
    new_id: str
    decoy_updates: List[Tuple[str, str]] = Field(default_factory=list)
    batch_order: List[str] = Field(
        default_factory=list,
        description="new ids in the order the k+1 updates were applied",
    )

    @property
    def k(self) -> int:
        return len(self.decoy_updates)

    def all_ids(self) -> List[str]:
        ids = [self.old_id, self.new_id]
        for old, new in self.decoy_updates:
            ids.extend((old, new))
        return ids


class ConsentRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    request_id: str
    requester: str
    purpose: str = ""
    requested_fields: List[str] = Field(default_factory=list)

    @field_validator("requested_fields")
    @classmethod
    def _dedupe(cls, v: List[str]) -> List[str]:
        return sorted(set(v))


class ConsentDecision(BaseModel):
    model_config = ConfigDict(frozen=True)

    request_id: str
    approved: bool
    fields: Dict[str, str] = Field(default_factory=dict)
    decided_at: int = 0


class Message(BaseModel):
    """Anonymous platform message addressed to a link contract."""

    model_config = ConfigDict(frozen=True)

    message_id: str
    to: str
    body: str
    sender_role: Role
    sent_at: int = 0


class Grant(BaseModel):
    """Off-ledger disclosure of the current entry id to one grantee."""

    model_config = ConfigDict(frozen=True)

    grant_id: str
    contract_address: str
    grantee: str
    entry_id: str
    endpoint_url: str
    granted_at: int = 0


def filter_fields(payload: Dict[str, str], requested: List[str]) -> Dict[str, str]:
    """Restrict a payload to the requested fields (all fields if none requested)."""
    if not requested:
        return dict(payload)
    return {k: v for k, v in payload.items() if k in set(requested)}
