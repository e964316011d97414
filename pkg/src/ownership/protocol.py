"""
Multi-plane ownership flows.

The protocol ties the ledger, the identifying stores, the record-store
consortium and owner vaults together: registration with cross-custodian
dedup, weak and strong claims, revoke and grant, identity resolution with
consent, the two third-party search flows, and anonymous messaging.

Flows that touch more than one plane run as sagas: plane mutations happen in
a fixed order and are compensated if a later step fails.
"""

import threading
from typing import Any, Dict, Iterable, List, Mapping, Optional, Set, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field

from .canonical import canonical_json, digest, sha256_hex
from .clock import SimulatedClock
from .crypto import KeyPair, verify_signature
from .errors import (
    ForbiddenError,
    InjectedFault,
    NotFoundError,
    OwnershipError,
    RejectedError,
    ValidationFailure,
)
from .identity_store import IdentityStore
from .ledger import Ledger, LinkContract
from .metrics import RESOLUTIONS
from .models import (
    ConsentDecision,
    ConsentRequest,
    DenyReason,
    Grant,
    Message,
    OwnershipState,
    ResolutionOutcome,
    Role,
    TumbleReceipt,
    filter_fields,
)
from .record_store import Consortium, DataRecord
from .trace import EventTrace
from .vault import Vault

logger = structlog.get_logger(__name__)

CLAIM_STRONG_BOUNDARIES = (
    "before_delete",
    "after_delete",
    "after_ingest",
    "after_set_vault",
    "after_directory_clear",
)
REGISTER_BOUNDARIES = ("after_store_create",)
UPDATE_IDENTITY_BOUNDARIES = ("after_repoint", "after_unpublish")


class FaultInjector:
    """Armed boundaries raise ``InjectedFault`` once when a saga reaches them."""

    def __init__(self) -> None:
        self._armed: Set[str] = set()
        self.fired: List[str] = []

    def arm(self, *boundaries: str) -> None:
        self._armed.update(boundaries)

    def disarm(self) -> None:
        self._armed.clear()

    def check(self, boundary: str) -> None:
        if boundary in self._armed:
            self._armed.discard(boundary)
            self.fired.append(boundary)
            raise InjectedFault(boundary)


class Candidate(BaseModel):
    model_config = ConfigDict(frozen=True)

    contract_address: str
    projection: Dict[str, Any] = Field(default_factory=dict)
    outcome: ResolutionOutcome


class LookupResult(BaseModel):
    """One identity-search hit; claimed users and chaff both come back with no records."""

    model_config = ConfigDict(frozen=True)

    entry_id: str
    endpoint_url: str
    contract_address: Optional[str] = None
    records: List[DataRecord] = Field(default_factory=list)
    denied: Optional[DenyReason] = None


class _ConsentTicket:
    __slots__ = ("request", "vault", "due_at", "decision")

    def __init__(self, request: ConsentRequest, vault: str, due_at: int):
        self.request = request
        self.vault = vault
        self.due_at = due_at
        self.decision: Optional[ConsentDecision] = None


def claim_token_bytes(contract_address: str, owner_address: str) -> bytes:
    return canonical_json(
        {"contract_address": contract_address, "owner_address": owner_address, "purpose": "claim"}
    )


class Protocol:
    """Orchestrates the ownership flows across every plane."""

    def __init__(
        self,
        ledger: Ledger,
        consortium: Consortium,
        *,
        identifying_fields: Iterable[str],
        dedup_key: str = "insurance_number",
        k_default: int = 9,
        consent_delay_ms: int = 0,
        seed: int = 0,
        clock: Optional[SimulatedClock] = None,
        trace: Optional[EventTrace] = None,
    ):
        self.ledger = ledger
        self.consortium = consortium
        self.identifying_fields = sorted(identifying_fields)
        self.dedup_key = dedup_key
        self.k_default = k_default
        self.consent_delay_ms = consent_delay_ms
        self.clock = clock or SimulatedClock()
        self.trace = trace if trace is not None else ledger.trace
        self.faults = FaultInjector()
        self._dedup_salt = digest({"dedup-salt": seed})
        self._custodian_keys: Dict[str, KeyPair] = {}
        self._stores: Dict[str, IdentityStore] = {}
        self._stores_by_endpoint: Dict[str, IdentityStore] = {}
        self._vaults: Dict[str, Vault] = {}
        self._onboarded: Dict[str, str] = {}
        self._grants: Dict[str, List[Grant]] = {}
        self._grant_inbox: Dict[str, List[Grant]] = {}
        self._messages: Dict[str, List[Message]] = {}
        self._tickets: Dict[str, _ConsentTicket] = {}
        self._states: Dict[str, OwnershipState] = {}
        self._counter = 0
        self._lock = threading.RLock()

    # -- wiring ----------------------------------------------------------------

    def add_custodian(self, keypair: KeyPair, store: IdentityStore) -> None:
        self._custodian_keys[keypair.address] = keypair
        self._stores[keypair.address] = store
        self._stores_by_endpoint[store.endpoint_url] = store

    def register_vault(self, vault: Vault) -> Vault:
        self._vaults[vault.address] = vault
        return vault

    def vault(self, address: str) -> Vault:
        vault = self._vaults.get(address)
        if vault is None:
            raise NotFoundError("unknown vault", vault=address)
        return vault

    def store_for(self, custodian: str) -> IdentityStore:
        store = self._stores.get(custodian)
        if store is None:
            raise ForbiddenError("principal is not a custodian with an identifying store")
        return store

    def store_at(self, endpoint_url: Optional[str]) -> IdentityStore:
        store = self._stores_by_endpoint.get(endpoint_url or "")
        if store is None:
            raise NotFoundError("unknown identifying store endpoint", endpoint_url=endpoint_url)
        return store

    @property
    def stores(self) -> List[IdentityStore]:
        return [self._stores[a] for a in sorted(self._stores)]

    def _next_id(self, kind: str, **parts: Any) -> str:
        self._counter += 1
        return digest({"kind": kind, "n": self._counter, **parts})

    def _owned_contract(self, owner: str, contract_address: str) -> LinkContract:
        contract = self.ledger.read_contract(contract_address)
        if contract.owner != owner:
            raise ForbiddenError("caller does not own this contract", contract=contract_address)
        return contract

    # -- state machine -------------------------------------------------------------

    def ownership_state(self, contract_address: str) -> OwnershipState:
        """Current state, derived from the ledger and the identifying store."""
        contract = self.ledger.read_contract(contract_address)
        if self.ledger.is_custodian(contract.owner):
            return OwnershipState.CUSTODIAN_HELD
        if contract.vault_address is not None:
            return OwnershipState.CLAIMED_STRONG
        if contract.entry_id is not None:
            store = self._stores_by_endpoint.get(contract.endpoint_url or "")
            if store is not None and contract.entry_id in store:
                return OwnershipState.CLAIMED_WEAK_LINKED
        return OwnershipState.CLAIMED_WEAK_REVOKED

    def _note_state(self, contract_address: str) -> OwnershipState:
        state = self.ownership_state(contract_address)
        previous = self._states.get(contract_address)
        if previous != state:
            self._states[contract_address] = state
            self.trace.record(
                "protocol",
                "state",
                {
                    "contract": contract_address,
                    "from": previous.value if previous else None,
                    "to": state.value,
                },
            )
        return state

    def _saga(self, saga: str, status: str, contract: Optional[str], **data: Any) -> None:
        self.trace.record("protocol", "saga", {"saga": saga, "status": status, "contract": contract, **data})

    def _current_entry_id(self, contract: LinkContract, vault: Vault) -> str:
        if contract.entry_id is not None and contract.entry_id in self.store_at(contract.endpoint_url):
            return contract.entry_id
        if vault.current_entry_id is not None:
            return vault.current_entry_id
        raise RejectedError("no live identity entry for this contract")

    # -- registration ------------------------------------------------------------------

    def _dedup_hash(self, value: str) -> str:
        return sha256_hex(f"{self._dedup_salt}:{value}".encode("utf-8"))

    def _check_unique(self, custodian: str, payload: Mapping[str, Any]) -> Optional[str]:
        value = payload.get(self.dedup_key)
        if value is None:
            return None
        key_hash = self._dedup_hash(value)
        if key_hash in self._onboarded:
            raise RejectedError("already registered")
        for store in self.stores:
            for entry_id in store.search_payload(custodian, {self.dedup_key: value}):
                if self.ledger.directory_lookup(entry_id) is not None:
                    raise RejectedError("already registered")
        return key_hash

    def register_user(
        self,
        custodian: str,
        personal_payload: Mapping[str, Any],
        chaff_ratio: Optional[float] = None,
    ) -> Tuple[str, str]:
        """Create the identity entry, deploy the link contract and publish it."""
        with self._lock:
            store = self.store_for(custodian)
            key = self._custodian_keys[custodian]
            key_hash = self._check_unique(custodian, personal_payload)
            checkpoint = store.checkpoint()
            self._saga("register_user", "begin", None)
            try:
                entry_id, _ = store.create_entry(custodian, personal_payload, chaff_ratio)
                self.faults.check("after_store_create")
                contract = self.ledger.deploy_link_contract(key, store.endpoint_url, entry_id)
            except OwnershipError as exc:
                store.restore(checkpoint)
                self._saga("register_user", "compensated", None, reason=exc.code)
                raise
            if key_hash is not None:
                self._onboarded[key_hash] = contract
            self._saga("register_user", "committed", contract)
            self._note_state(contract)
        logger.info("protocol.registered", contract=contract[:16], store=store.endpoint_url)
        return entry_id, contract

    def update_identity(self, custodian: str, contract_address: str, new_payload: Mapping[str, Any]) -> str:
        """Custodian edit of an unclaimed user's payload, kept consistent on all planes."""
        with self._lock:
            contract = self._owned_contract(custodian, contract_address)
            key = self._custodian_keys[custodian]
            store = self.store_at(contract.endpoint_url)
            old_id = contract.entry_id
            if old_id is None:
                raise RejectedError("contract carries no identity link")
            checkpoint = store.checkpoint()
            new_id = store.update_payload(custodian, old_id, new_payload)
            repointed = False
            cleared: List[str] = []
            self._saga("update_identity", "begin", contract_address)
            try:
                self.ledger.update_entry_id(contract_address, key, new_id)
                repointed = True
                self.faults.check("after_repoint")
                cleared = self.ledger.directory_clear(contract_address, key, [old_id])
                self.faults.check("after_unpublish")
                self.ledger.directory_put(new_id, contract_address, key)
            except OwnershipError as exc:
                store.restore(checkpoint)
                if repointed:
                    self.ledger.update_entry_id(contract_address, key, old_id)
                for entry_id in cleared:
                    self.ledger.directory_put(entry_id, contract_address, key)
                self._saga("update_identity", "compensated", contract_address, reason=exc.code)
                raise
            self._saga("update_identity", "committed", contract_address)
            self._note_state(contract_address)
        return new_id

    # -- claims ---------------------------------------------------------------------------

    def issue_claim_token(self, custodian: str, contract_address: str, owner_address: str) -> str:
        """Custodian attestation that it authenticated ``owner_address`` out of band."""
        self._owned_contract(custodian, contract_address)
        key = self._custodian_keys.get(custodian)
        if key is None:
            raise ForbiddenError("principal is not a custodian")
        return key.sign_hex(claim_token_bytes(contract_address, owner_address))

    def claim_weak(self, owner: str, contract_address: str, custodian_auth_token: str) -> None:
        with self._lock:
            vault = self.vault(owner)
            contract = self.ledger.read_contract(contract_address)
            if not self.ledger.is_custodian(contract.owner):
                raise RejectedError("contract already claimed")
            custodian_key = self._custodian_keys.get(contract.owner)
            if custodian_key is None or not verify_signature(
                custodian_key.public_key,
                custodian_auth_token,
                claim_token_bytes(contract_address, owner),
            ):
                raise RejectedError("invalid claim token")
            self.ledger.transfer_ownership(contract_address, custodian_key, owner)
            vault.contract_address = contract_address
            self._note_state(contract_address)
        logger.info("protocol.claimed_weak", contract=contract_address[:16])

    def revoke_link(self, owner: str, contract_address: str, k: Optional[int] = None) -> TumbleReceipt:
        """Tumble the owner's entry without touching the contract, breaking the link."""
        with self._lock:
            vault = self.vault(owner)
            contract = self._owned_contract(owner, contract_address)
            state = self.ownership_state(contract_address)
            if state not in (OwnershipState.CLAIMED_WEAK_LINKED, OwnershipState.CLAIMED_WEAK_REVOKED):
                raise RejectedError(f"cannot revoke in state {state.value}")
            current = self._current_entry_id(contract, vault)
            store = self.store_at(contract.endpoint_url)
            receipt = store.tumble(owner, current, self.k_default if k is None else k)
            vault.receive_receipt(receipt)
            self.ledger.directory_clear(contract_address, vault.keypair)
            self._note_state(contract_address)
        logger.info("protocol.revoked", contract=contract_address[:16], k=receipt.k)
        return receipt

    def rotate_id(self, owner: str, contract_address: str, k: Optional[int] = None) -> TumbleReceipt:
        """Renew the entry id and re-point the contract at it; the link stays intact."""
        with self._lock:
            vault = self.vault(owner)
            contract = self._owned_contract(owner, contract_address)
            if self.ownership_state(contract_address) != OwnershipState.CLAIMED_WEAK_LINKED:
                raise RejectedError("rotation requires a linked weak claim")
            store = self.store_at(contract.endpoint_url)
            checkpoint = store.checkpoint()
            receipt = store.tumble(owner, contract.entry_id, self.k_default if k is None else k)
            try:
                self.ledger.update_entry_id(contract_address, vault.keypair, receipt.new_id)
                republished = self.ledger.directory_clear(contract_address, vault.keypair)
                if republished:
                    self.ledger.directory_put(receipt.new_id, contract_address, vault.keypair)
            except OwnershipError:
                store.restore(checkpoint)
                raise
            vault.receive_receipt(receipt)
            self._note_state(contract_address)
        return receipt

    def grant_access(
        self,
        owner: str,
        contract_address: str,
        grantee: str,
        republish: bool = False,
    ) -> Grant:
        """Disclose the current entry id to ``grantee``; optionally re-link and re-publish."""
        with self._lock:
            vault = self.vault(owner)
            contract = self._owned_contract(owner, contract_address)
            state = self.ownership_state(contract_address)
            if state not in (OwnershipState.CLAIMED_WEAK_LINKED, OwnershipState.CLAIMED_WEAK_REVOKED):
                raise RejectedError(f"cannot grant in state {state.value}")
            current = self._current_entry_id(contract, vault)
            grant = Grant(
                grant_id=self._next_id("grant", contract=contract_address, grantee=grantee),
                contract_address=contract_address,
                grantee=grantee,
                entry_id=current,
                endpoint_url=contract.endpoint_url or "",
                granted_at=self.clock.now(),
            )
            self._grants.setdefault(contract_address, []).append(grant)
            self._grant_inbox.setdefault(grantee, []).append(grant)
            self.trace.record(
                "protocol",
                "grant",
                {"contract": contract_address, "grantee": grantee, "grant_id": grant.grant_id},
                actor=owner,
                private=True,
            )
            if republish:
                if contract.entry_id != current:
                    self.ledger.update_entry_id(contract_address, vault.keypair, current)
                if self.ledger.directory_lookup(current) != contract_address:
                    self.ledger.directory_put(current, contract_address, vault.keypair)
            self._note_state(contract_address)
        return grant

    def received_grants(self, grantee: str) -> List[Grant]:
        return list(self._grant_inbox.get(grantee, []))

    def claim_strong(self, owner: str, contract_address: str) -> None:
        """Move the payload from the identifying store into the owner's vault."""
        with self._lock:
            vault = self.vault(owner)
            contract = self._owned_contract(owner, contract_address)
            state = self.ownership_state(contract_address)
            if state not in (OwnershipState.CLAIMED_WEAK_LINKED, OwnershipState.CLAIMED_WEAK_REVOKED):
                raise RejectedError(f"cannot claim strong ownership in state {state.value}")
            current = self._current_entry_id(contract, vault)
            store = self.store_at(contract.endpoint_url)
            checkpoint = store.checkpoint()
            ingested = linked_to_vault = False
            cleared: List[str] = []
            self._saga("claim_strong", "begin", contract_address)
            try:
                self.faults.check("before_delete")
                payload = store.delete_entry(owner, current)
                self.faults.check("after_delete")
                vault.ingest_payload(payload)
                ingested = True
                self.faults.check("after_ingest")
                self.ledger.set_vault(contract_address, vault.keypair, vault.address)
                linked_to_vault = True
                self.faults.check("after_set_vault")
                cleared = self.ledger.directory_clear(contract_address, vault.keypair)
                self.faults.check("after_directory_clear")
            except OwnershipError as exc:
                if ingested:
                    vault.clear_payload()
                store.restore(checkpoint)
                if linked_to_vault:
                    self.ledger.update_entry_id(
                        contract_address, vault.keypair, contract.entry_id, contract.endpoint_url
                    )
                for entry_id in cleared:
                    self.ledger.directory_put(entry_id, contract_address, vault.keypair)
                self._saga("claim_strong", "compensated", contract_address, reason=exc.code)
                raise
            self._saga("claim_strong", "committed", contract_address)
            self._note_state(contract_address)
        logger.info("protocol.claimed_strong", contract=contract_address[:16])

    # -- resolution -------------------------------------------------------------------------

    def _requested(self, requested_fields: Optional[Iterable[str]]) -> List[str]:
        fields = sorted(set(requested_fields or self.identifying_fields))
        unknown = [f for f in fields if f not in self.identifying_fields]
        if unknown:
            raise ValidationFailure(f"not identifying fields: {', '.join(unknown)}", fields=unknown)
        return fields

    def _outcome_from_decision(self, decision: ConsentDecision) -> ResolutionOutcome:
        if decision.approved:
            return ResolutionOutcome.identified(decision.fields)
        return ResolutionOutcome.denied(DenyReason.OWNER_DENIED)

    def _live_grant(self, contract_address: str, requester: str) -> Optional[Dict[str, str]]:
        for grant in reversed(self._grants.get(contract_address, [])):
            if grant.grantee != requester:
                continue
            store = self._stores_by_endpoint.get(grant.endpoint_url)
            if store is not None and grant.entry_id in store:
                return store.read_entry(grant.entry_id)
        return None

    def resolve_identity(
        self,
        third_party: str,
        contract_address: str,
        purpose: str = "",
        requested_fields: Optional[Iterable[str]] = None,
    ) -> ResolutionOutcome:
        """Contract address to identifying payload, gated by flag, link liveness and consent."""
        with self._lock:
            try:
                contract = self.ledger.read_contract(contract_address)
                fields = self._requested(requested_fields)
            except OwnershipError as exc:
                self._record_resolution(contract_address, third_party, purpose, "error", reason=exc.code)
                raise
            if not contract.access_flag:
                outcome = ResolutionOutcome.denied(DenyReason.FLAG_OFF)
            elif contract.vault_address is not None:
                outcome = self._ask_vault(third_party, contract, purpose, fields)
            else:
                payload: Optional[Dict[str, str]] = None
                if contract.entry_id is not None:
                    store = self._stores_by_endpoint.get(contract.endpoint_url or "")
                    if store is not None and contract.entry_id in store:
                        payload = store.read_entry(contract.entry_id)
                if payload is None:
                    payload = self._live_grant(contract_address, third_party)
                if payload is None:
                    outcome = ResolutionOutcome.denied(DenyReason.LINK_BROKEN)
                else:
                    outcome = ResolutionOutcome.identified(filter_fields(payload, fields))
        RESOLUTIONS.labels(outcome=outcome.outcome.value).inc()
        self._record_resolution(
            contract_address,
            third_party,
            purpose,
            outcome.outcome.value,
            reason=outcome.reason.value if outcome.reason else None,
            request_id=outcome.request_id,
            fields=sorted(outcome.payload or {}),
        )
        return outcome

    def _record_resolution(
        self,
        contract_address: str,
        requester: str,
        purpose: str,
        outcome: str,
        reason: Optional[str] = None,
        request_id: Optional[str] = None,
        fields: Optional[List[str]] = None,
    ) -> None:
        self.trace.record(
            "protocol",
            "resolution",
            {
                "contract": contract_address,
                "requester": requester,
                "purpose": purpose,
                "outcome": outcome,
                "reason": reason,
                "request_id": request_id,
                "fields": fields or [],
            },
            actor=requester,
        )

    def _ask_vault(
        self, requester: str, contract: LinkContract, purpose: str, fields: List[str]
    ) -> ResolutionOutcome:
        vault = self._vaults.get(contract.vault_address or "")
        if vault is None or not vault.has_payload:
            return ResolutionOutcome.denied(DenyReason.OWNER_DENIED)
        request = ConsentRequest(
            request_id=self._next_id("consent", contract=contract.address, requester=requester),
            requester=requester,
            purpose=purpose,
            requested_fields=fields,
        )
        ticket = _ConsentTicket(request, vault.address, self.clock.now() + self.consent_delay_ms)
        self._tickets[request.request_id] = ticket
        vault.submit(request)
        if self.consent_delay_ms > 0:
            return ResolutionOutcome.pending(request.request_id)
        self._answer(ticket)
        return self._outcome_from_decision(ticket.decision)

    def _answer(self, ticket: _ConsentTicket) -> None:
        vault = self._vaults[ticket.vault]
        while ticket.decision is None:
            decision = vault.process_next()
            if decision is None:
                break
            answered = self._tickets.get(decision.request_id)
            if answered is not None:
                answered.decision = decision

    def process_consents(self, now: Optional[int] = None) -> int:
        """Let vaults answer every consent request due by ``now``."""
        answered = 0
        with self._lock:
            due = sorted(
                (t for t in self._tickets.values() if t.decision is None and (now is None or t.due_at <= now)),
                key=lambda t: (t.due_at, t.request.request_id),
            )
            for ticket in due:
                if ticket.decision is None:
                    self._answer(ticket)
                    answered += 1
        return answered

    def consent_result(self, requester: str, request_id: str) -> ResolutionOutcome:
        ticket = self._tickets.get(request_id)
        if ticket is None:
            raise NotFoundError("unknown consent request", request_id=request_id)
        if ticket.request.requester != requester:
            raise ForbiddenError("only the requester may poll a consent request")
        if ticket.decision is None:
            return ResolutionOutcome.pending(request_id)
        return self._outcome_from_decision(ticket.decision)

    # -- third-party search flows ---------------------------------------------------------------

    def search_candidates(
        self,
        third_party: str,
        query_name: str,
        params: Optional[Dict[str, Any]] = None,
        purpose: str = "",
        requested_fields: Optional[Iterable[str]] = None,
    ) -> List[Candidate]:
        """Whitelisted record query, then a resolution attempt per candidate contract."""
        result = self.consortium.query(third_party, query_name, params or {}, role=Role.THIRD_PARTY)
        outcomes: Dict[str, ResolutionOutcome] = {}
        candidates = []
        for row in result.rows:
            if row.contract_address not in outcomes:
                outcomes[row.contract_address] = self.resolve_identity(
                    third_party, row.contract_address, purpose, requested_fields
                )
            candidates.append(
                Candidate(
                    contract_address=row.contract_address,
                    projection=row.projection,
                    outcome=outcomes[row.contract_address],
                )
            )
        return candidates

    def lookup_by_identity(self, third_party: str, identity_criteria: Mapping[str, Any]) -> List[LookupResult]:
        """Identity search, directory lookup, then reverse lookup of the records."""
        results = []
        for store in self.stores:
            for entry_id in store.search_payload(third_party, identity_criteria):
                address = self.ledger.directory_lookup(entry_id)
                if address is None:
                    results.append(
                        LookupResult(entry_id=entry_id, endpoint_url=store.endpoint_url, denied=DenyReason.CLAIMED)
                    )
                    continue
                results.append(
                    LookupResult(
                        entry_id=entry_id,
                        endpoint_url=store.endpoint_url,
                        contract_address=address,
                        records=self.consortium.reverse_lookup(third_party, address),
                    )
                )
        self.trace.record(
            "protocol",
            "identity_lookup",
            {"requester": third_party, "hits": len(results), "linked": sum(1 for r in results if r.contract_address)},
            actor=third_party,
        )
        return results

    def own_records(self, owner: str, contract_address: str) -> List[DataRecord]:
        """An owner's reverse lookup of their own contract."""
        self._owned_contract(owner, contract_address)
        return self.consortium.reverse_lookup(owner, contract_address)

    # -- messaging ---------------------------------------------------------------------------

    def send_message(self, sender: str, contract_address: str, body: str, sender_role: Role = Role.THIRD_PARTY) -> str:
        if not self.ledger.has_contract(contract_address):
            raise NotFoundError(f"unknown contract {contract_address}")
        message = Message(
            message_id=self._next_id("message", to=contract_address),
            to=contract_address,
            body=body,
            sender_role=sender_role,
            sent_at=self.clock.now(),
        )
        with self._lock:
            self._messages.setdefault(contract_address, []).append(message)
        self.trace.record("protocol", "message", {"message_id": message.message_id, "to": contract_address})
        return message.message_id

    def fetch_messages(self, owner: str, contract_address: Optional[str] = None) -> List[Message]:
        """Messages addressed to contracts the caller owns."""
        if contract_address is not None:
            self._owned_contract(owner, contract_address)
            owned = [contract_address]
        else:
            owned = [c.address for c in self.ledger.contracts() if c.owner == owner]
            if not owned:
                raise ForbiddenError("caller owns no contract")
        return [m for address in owned for m in self._messages.get(address, [])]

    def nudge_candidates(
        self,
        sender: str,
        query_name: str,
        params: Optional[Dict[str, Any]],
        body: str,
        sender_role: Role = Role.CUSTODIAN,
        role: Role = Role.CUSTODIAN,
    ) -> List[str]:
        """Message every contract matched by a whitelisted query without identifying anyone."""
        result = self.consortium.query(sender, query_name, params or {}, role=role)
        recipients = sorted({row.contract_address for row in result.rows})
        return [self.send_message(sender, address, body, sender_role) for address in recipients]

    # -- views ------------------------------------------------------------------------------

    def states(self) -> Dict[str, OwnershipState]:
        return dict(self._states)
