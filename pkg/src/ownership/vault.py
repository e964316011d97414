"""
Simulated self-sovereign identity agent.

A vault holds the owner's key pair, the identifying payload after a strong
claim, the private tumble receipts, and answers consent requests under a
pluggable policy. Human decisions are reproduced with scripted policies.
"""

from abc import ABC, abstractmethod
from collections import deque
from typing import Any, Deque, Dict, Iterable, List, Optional, Sequence

import structlog
from pydantic import BaseModel, ConfigDict

from .canonical import canonical_json
from .clock import SimulatedClock
from .crypto import KeyPair
from .errors import NotFoundError, RejectedError, ValidationFailure
from .models import ConsentDecision, ConsentRequest, TumbleReceipt
from .trace import EventTrace

logger = structlog.get_logger(__name__)


class ConsentPolicy(ABC):
    name = "policy"

    @abstractmethod
    def decide(self, requester: str) -> bool:
        """Return True to approve a disclosure to ``requester``."""

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name}


class AlwaysApprove(ConsentPolicy):
    name = "always-approve"

    def decide(self, requester: str) -> bool:
        return True


class AlwaysDeny(ConsentPolicy):
    name = "always-deny"

    def decide(self, requester: str) -> bool:
        return False


class AllowlistPolicy(ConsentPolicy):
    name = "allowlist"

    def __init__(self, addresses: Iterable[str]):
        self.addresses = set(addresses)

    def decide(self, requester: str) -> bool:
        return requester in self.addresses

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name, "addresses": sorted(self.addresses)}


class ScriptedPolicy(ConsentPolicy):
    """Answers from a fixed script regardless of requester; denies once exhausted."""

    name = "scripted"

    def __init__(self, script: Sequence[bool | str]):
        self._script: Deque[bool] = deque(_as_decision(s) for s in script)

    def decide(self, requester: str) -> bool:
        return self._script.popleft() if self._script else False

    def describe(self) -> Dict[str, Any]:
        return {"kind": self.name, "remaining": ["approve" if d else "deny" for d in self._script]}


def _as_decision(value: bool | str) -> bool:
    if isinstance(value, bool):
        return value
    if value in ("approve", "allow"):
        return True
    if value == "deny":
        return False
    raise ValidationFailure(f"unknown scripted decision '{value}'")


def make_policy(spec: str | Dict[str, Any] | ConsentPolicy | None) -> ConsentPolicy:
    """Build a policy from ``"always-approve"`` or ``{"kind": ..., ...}``."""
    if spec is None:
        return AlwaysDeny()
    if isinstance(spec, ConsentPolicy):
        return spec
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == AlwaysApprove.name:
        return AlwaysApprove()
    if kind == AlwaysDeny.name:
        return AlwaysDeny()
    if kind == AllowlistPolicy.name:
        return AllowlistPolicy(spec.get("addresses", []))
    if kind == ScriptedPolicy.name:
        return ScriptedPolicy(spec.get("script", []))
    raise ValidationFailure(f"unknown consent policy '{kind}'")


class DecisionEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    request: ConsentRequest
    decision: ConsentDecision
    at: int


class RevealEntry(BaseModel):
    model_config = ConfigDict(frozen=True)

    recipient: str
    approved: bool
    at: int


class Vault:
    """Owner-held agent: keys, payload after a strong claim, consent decisions."""

    def __init__(
        self,
        keypair: KeyPair,
        policy: Optional[ConsentPolicy] = None,
        clock: Optional[SimulatedClock] = None,
        trace: Optional[EventTrace] = None,
    ):
        self.keypair = keypair
        self.policy = policy or AlwaysDeny()
        self.clock = clock or SimulatedClock()
        self.trace = trace
        self.contract_address: Optional[str] = None
        self._payload: Dict[str, str] = {}
        self._pending: Deque[ConsentRequest] = deque()
        self._decisions: List[DecisionEntry] = []
        self._reveals: List[RevealEntry] = []
        self._receipts: List[TumbleReceipt] = []

    @classmethod
    def create_identity(cls, seed: str | int | bytes, **kwargs: Any) -> "Vault":
        """Deterministic vault: same seed, same address."""
        return cls(KeyPair.from_seed(seed), **kwargs)

    @property
    def address(self) -> str:
        return self.keypair.address

    @property
    def has_payload(self) -> bool:
        return bool(self._payload)

    def _record(self, kind: str, data: Dict[str, Any], private: bool = True) -> None:
        if self.trace is not None:
            self.trace.record("vault", kind, data, actor=self.address, private=private)

    # -- payload custody ----------------------------------------------------------

    def ingest_payload(self, payload: Dict[str, str]) -> None:
        if self._payload:
            raise RejectedError("vault already holds a payload")
        if not payload:
            raise ValidationFailure("cannot ingest an empty payload")
        self._payload = dict(payload)
        self._record("ingested", {"fields": sorted(payload)})
        logger.info("vault.ingested", vault=self.address[:16])

    def clear_payload(self) -> Dict[str, str]:
        """Drop the stored payload and hand it back (saga compensation)."""
        payload, self._payload = self._payload, {}
        if payload:
            self._record("cleared", {"fields": sorted(payload)})
        return payload

    # -- consent ---------------------------------------------------------------------

    def handle_consent(self, request: ConsentRequest) -> ConsentDecision:
        """Decide one request under the current policy and log the decision.

        A vault with no payload denies every request without consulting its policy.
        """
        approved = bool(self._payload) and self.policy.decide(request.requester)
        fields: Dict[str, str] = {}
        if approved:
            fields = {k: v for k, v in self._payload.items() if k in request.requested_fields}
            approved = bool(fields)
        decision = ConsentDecision(
            request_id=request.request_id,
            approved=approved,
            fields=fields,
            decided_at=self.clock.now(),
        )
        self._decisions.append(DecisionEntry(request=request, decision=decision, at=self.clock.now()))
        self._record(
            "consent_decision",
            {
                "request_id": request.request_id,
                "requester": request.requester,
                "approved": approved,
                "fields": sorted(fields),
            },
        )
        logger.info("vault.consent", request_id=request.request_id, approved=approved)
        return decision

    def submit(self, request: ConsentRequest) -> None:
        self._pending.append(request)

    def process_next(self) -> Optional[ConsentDecision]:
        """Answer the oldest queued request, if any."""
        if not self._pending:
            return None
        return self.handle_consent(self._pending.popleft())

    def process_pending(self) -> List[ConsentDecision]:
        """Answer queued requests in arrival order."""
        decisions = []
        while self._pending:
            decisions.append(self.handle_consent(self._pending.popleft()))
        return decisions

    @property
    def pending(self) -> List[ConsentRequest]:
        return list(self._pending)

    def reveal_contract_address(self, to: str) -> Optional[str]:
        """The owner's contract address if the policy permits ``to``; None otherwise."""
        if self.contract_address is None:
            raise NotFoundError("vault has no contract")
        approved = self.policy.decide(to)
        self._reveals.append(RevealEntry(recipient=to, approved=approved, at=self.clock.now()))
        self._record("reveal", {"recipient": to, "approved": approved})
        return self.contract_address if approved else None

    # -- receipts --------------------------------------------------------------------

    def receive_receipt(self, receipt: TumbleReceipt) -> None:
        self._receipts.append(receipt)

    @property
    def receipts(self) -> List[TumbleReceipt]:
        return list(self._receipts)

    @property
    def current_entry_id(self) -> Optional[str]:
        return self._receipts[-1].new_id if self._receipts else None

    # -- logs -------------------------------------------------------------------------

    @property
    def decisions(self) -> List[DecisionEntry]:
        return list(self._decisions)

    @property
    def reveals(self) -> List[RevealEntry]:
        return list(self._reveals)

    def disclosed_fields(self) -> Dict[str, List[str]]:
        """Fields disclosed per requester, derived from the decision log."""
        out: Dict[str, set] = {}
        for entry in self._decisions:
            if entry.decision.approved:
                out.setdefault(entry.request.requester, set()).update(entry.decision.fields)
        return {requester: sorted(fields) for requester, fields in sorted(out.items())}

    def export_decisions(self) -> bytes:
        """JSON log of decisions without the disclosed values."""
        return canonical_json(
            [
                {
                    "request": entry.request.model_dump(mode="json"),
                    "request_id": entry.decision.request_id,
                    "approved": entry.decision.approved,
                    "fields": sorted(entry.decision.fields),
                    "at": entry.at,
                }
                for entry in self._decisions
            ]
        )
