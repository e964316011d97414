"""
Gateway: complete mediation of every module operation.

Each request is a signed envelope. The gateway authenticates it, authorizes
the operation against the static role matrix, dispatches to the handler
registered for the operation name, and writes an audit entry for the
decision. Handlers run with the authenticated principal as the caller; a
principal can never act under another address.
"""

import inspect
import time
from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

import structlog
from pydantic import BaseModel, ValidationError

from ..canonical import canonical_loads
from ..crypto import KeyPair
from ..errors import ForbiddenError, NotFoundError, OwnershipError, UnauthorizedError, ValidationFailure
from ..metrics import REQUEST_COUNT
from ..models import Role
from ..system import System
from ..vault import Vault, make_policy
from .audit import AuditLogger
from .authorization import Decision, authorize
from .envelopes import EnvelopeVerifier, RequestEnvelope
from .principals import Principal, PrincipalRegistry

logger = structlog.get_logger(__name__)


@dataclass(frozen=True)
class Operation:
    name: str
    description: str
    handler: Callable[..., Any]

    @property
    def module(self) -> str:
        return self.name.split(".", 1)[0]

    @property
    def op(self) -> str:
        return self.name.split(".", 1)[1]


# Registry of mediated operations
OPERATIONS: Dict[str, Operation] = {}


def register_operation(name: str, description: str = "") -> Callable:
    """Decorator adding a handler to the operation table.

    Args:
        name: ``module.op`` name, also the service route ``POST /module/op``
        description: Optional description; defaults to the handler docstring

    Returns:
        Decorator function
    """

    def decorator(func: Callable) -> Callable:
        if name in OPERATIONS:
            raise ValueError(f"operation '{name}' registered twice")
        OPERATIONS[name] = Operation(name=name, description=description or func.__doc__ or "", handler=func)
        return func

    return decorator


def to_jsonable(value: Any) -> Any:
    if isinstance(value, BaseModel):
        return value.model_dump(mode="json")
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, bytes):
        return value.decode("utf-8")
    if isinstance(value, dict):
        return {k: to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    return value


class Gateway:
    """Authenticates, authorizes, dispatches and audits envelopes."""

    def __init__(self, system: System, audit: Optional[AuditLogger] = None):
        self.system = system
        self.registry = PrincipalRegistry(system.clock)
        self.verifier = EnvelopeVerifier(self.registry)
        self.audit = audit or AuditLogger(system.settings.audit_log_path, trace=system.trace, clock=system.clock)
        self.admin = self.registry.register(_admin_public_key(system), Role.ADMIN, "admin")
        for custodian in system.settings.custodians:
            self.registry.register_key(system.custodian(custodian.name), Role.CUSTODIAN, custodian.name)

    @property
    def operations(self) -> Dict[str, Operation]:
        return OPERATIONS

    def handle(self, envelope: RequestEnvelope | Dict[str, Any]) -> Any:
        """Run one request end to end and return a JSON-compatible result."""
        if not isinstance(envelope, RequestEnvelope):
            try:
                envelope = RequestEnvelope.model_validate(envelope)
            except ValidationError as exc:
                raise ValidationFailure(
                    "malformed request envelope",
                    errors=exc.errors(include_url=False, include_context=False, include_input=False),
                )
        operation = OPERATIONS.get(envelope.operation)
        label = envelope.operation if operation is not None else "unknown"

        try:
            principal = self.verifier.authenticate(envelope)
        except UnauthorizedError as exc:
            REQUEST_COUNT.labels(operation=label, decision="unauthenticated").inc()
            self.audit.log_security_event(
                exc.code,
                exc.message,
                principal=envelope.principal,
                operation=envelope.operation,
                nonce=envelope.nonce,
            )
            raise

        decision = authorize(principal, envelope.operation) if operation is not None else Decision.DENY
        if decision is Decision.DENY:
            REQUEST_COUNT.labels(operation=label, decision=decision.value).inc()
            self.audit.log_request(
                envelope.operation, decision.value, principal.address, envelope.nonce, 403, role=principal.role.value
            )
            raise ForbiddenError(
                f"role {principal.role.value} may not call {envelope.operation}",
                operation=envelope.operation,
                role=principal.role.value,
            )

        handler = operation.handler
        try:
            inspect.signature(handler).bind(self, principal, **envelope.params)
        except TypeError as exc:
            REQUEST_COUNT.labels(operation=label, decision="invalid").inc()
            self.audit.log_request(envelope.operation, decision.value, principal.address, envelope.nonce, 422)
            raise ValidationFailure(f"bad parameters for {envelope.operation}: {exc}")

        start = time.perf_counter()
        try:
            result = handler(self, principal, **envelope.params)
        except OwnershipError as exc:
            REQUEST_COUNT.labels(operation=label, decision="error").inc()
            self.audit.log_request(
                envelope.operation,
                decision.value,
                principal.address,
                envelope.nonce,
                exc.http_status,
                error=exc.code,
            )
            raise
        REQUEST_COUNT.labels(operation=label, decision=decision.value).inc()
        self.audit.log_request(envelope.operation, decision.value, principal.address, envelope.nonce, 200)
        logger.debug(
            "gateway.handled",
            operation=envelope.operation,
            elapsed_ms=round((time.perf_counter() - start) * 1000, 3),
        )
        return to_jsonable(result)

    # -- helpers used by handlers -------------------------------------------------

    def custodian_key(self, principal: Principal) -> KeyPair:
        return self.system.key_for(principal.address)

    def owner_vault(self, principal: Principal) -> Vault:
        return self.system.protocol.vault(principal.address)


def _admin_public_key(system: System) -> str:
    return KeyPair.from_seed(system.settings.admin_seed).public_key_hex


# -- gateway ------------------------------------------------------------------------


@register_operation("gateway.register_principal")
def register_principal(
    gw: Gateway, principal: Principal, public_key: str, role: str, display_name: str = ""
) -> Principal:
    """Register a principal with a fixed role."""
    registered = gw.registry.register(public_key, role, display_name)
    gw.audit.log_event(
        "gateway.principal_registered",
        f"registered {registered.role.value}",
        principal=principal.address,
        registered=registered.address,
        role=registered.role.value,
    )
    return registered


# -- ledger -------------------------------------------------------------------------


@register_operation("ledger.read_contract")
def read_contract(gw: Gateway, principal: Principal, contract_address: str):
    return gw.system.ledger.read_contract(contract_address)


@register_operation("ledger.directory_lookup")
def directory_lookup(gw: Gateway, principal: Principal, entry_id: str) -> Dict[str, Optional[str]]:
    return {"entry_id": entry_id, "contract_address": gw.system.ledger.directory_lookup(entry_id)}


@register_operation("ledger.export_log")
def export_ledger_log(gw: Gateway, principal: Principal) -> Dict[str, str]:
    return {"ndjson": gw.system.ledger.export_log().decode("utf-8")}


@register_operation("ledger.set_access_flag")
def set_access_flag(gw: Gateway, principal: Principal, contract_address: str, flag: bool) -> Dict[str, Any]:
    gw.system.ledger.set_access_flag(contract_address, gw.owner_vault(principal).keypair, bool(flag))
    return {"contract_address": contract_address, "access_flag": bool(flag)}


# -- identity store ---------------------------------------------------------------------


@register_operation("identity_store.tumble")
def tumble(gw: Gateway, principal: Principal, entry_id: str, k: Optional[int] = None):
    store = gw.system.protocol.store_for(principal.address)
    return store.tumble(principal.address, entry_id, gw.system.settings.k_default if k is None else k)


@register_operation("identity_store.tumble_chaff")
def tumble_chaff(gw: Gateway, principal: Principal, k: int) -> Dict[str, int]:
    store = gw.system.protocol.store_for(principal.address)
    return {"batch_id": store.tumble_chaff(principal.address, k)}


@register_operation("identity_store.mutation_feed")
def mutation_feed(gw: Gateway, principal: Principal, endpoint_url: str, since_batch: int = 0):
    return gw.system.protocol.store_at(endpoint_url).mutation_feed(since_batch)


@register_operation("identity_store.export_snapshot")
def export_identity_snapshot(gw: Gateway, principal: Principal) -> Any:
    return canonical_loads(gw.system.protocol.store_for(principal.address).export_snapshot())


# -- record store -------------------------------------------------------------------------


@register_operation("record_store.create_record")
def create_record(
    gw: Gateway,
    principal: Principal,
    contract_address: str,
    schema_tag: str,
    payload: Dict[str, Any],
    links: Optional[List[str]] = None,
) -> Dict[str, str]:
    record_id = gw.system.consortium.create_record(
        gw.custodian_key(principal), contract_address, links or [], schema_tag, payload
    )
    return {"record_id": record_id}


@register_operation("record_store.append_version")
def append_version(gw: Gateway, principal: Principal, record_id: str, payload: Dict[str, Any]) -> Dict[str, Any]:
    index = gw.system.consortium.append_version(gw.custodian_key(principal), record_id, payload)
    return {"record_id": record_id, "version_index": index}


@register_operation("record_store.query")
def query(gw: Gateway, principal: Principal, query_name: str, params: Optional[Dict[str, Any]] = None):
    return gw.system.consortium.query(principal.address, query_name, params or {}, role=principal.role)


@register_operation("record_store.reverse_lookup")
def reverse_lookup(gw: Gateway, principal: Principal, contract_address: str):
    return gw.system.consortium.reverse_lookup(principal.address, contract_address)


@register_operation("record_store.get_record")
def get_record(gw: Gateway, principal: Principal, record_id: str):
    return gw.system.consortium.get_record(record_id)


@register_operation("record_store.manage_whitelist")
def manage_whitelist(gw: Gateway, principal: Principal, action: str, document: Any) -> Dict[str, int]:
    """Add or remove an approved query; the whitelist is versioned."""
    version = gw.system.consortium.whitelist.manage(principal.address, action, document)
    return {"version": version}


@register_operation("record_store.whitelist_history")
def whitelist_history(gw: Gateway, principal: Principal):
    return gw.system.consortium.whitelist.history()


@register_operation("record_store.export_snapshot")
def export_record_snapshot(gw: Gateway, principal: Principal) -> Any:
    return canonical_loads(gw.system.consortium.node_for(principal.address).export_snapshot())


# -- protocol ------------------------------------------------------------------------------


@register_operation("protocol.register_user")
def register_user(
    gw: Gateway, principal: Principal, payload: Dict[str, Any], chaff_ratio: Optional[float] = None
) -> Dict[str, str]:
    entry_id, contract = gw.system.protocol.register_user(principal.address, payload, chaff_ratio)
    return {"entry_id": entry_id, "contract_address": contract}


@register_operation("protocol.update_identity")
def update_identity(
    gw: Gateway, principal: Principal, contract_address: str, payload: Dict[str, Any]
) -> Dict[str, str]:
    return {"entry_id": gw.system.protocol.update_identity(principal.address, contract_address, payload)}


@register_operation("protocol.issue_claim_token")
def issue_claim_token(gw: Gateway, principal: Principal, contract_address: str, owner_address: str) -> Dict[str, str]:
    return {"token": gw.system.protocol.issue_claim_token(principal.address, contract_address, owner_address)}


@register_operation("protocol.ownership_state")
def ownership_state(gw: Gateway, principal: Principal, contract_address: str) -> Dict[str, str]:
    return {
        "contract_address": contract_address,
        "state": gw.system.protocol.ownership_state(contract_address).value,
    }


@register_operation("protocol.claim_weak")
def claim_weak(gw: Gateway, principal: Principal, contract_address: str, token: str) -> Dict[str, str]:
    gw.system.protocol.claim_weak(principal.address, contract_address, token)
    return ownership_state(gw, principal, contract_address)


@register_operation("protocol.claim_strong")
def claim_strong(gw: Gateway, principal: Principal, contract_address: str) -> Dict[str, str]:
    gw.system.protocol.claim_strong(principal.address, contract_address)
    return ownership_state(gw, principal, contract_address)


@register_operation("protocol.revoke_link")
def revoke_link(gw: Gateway, principal: Principal, contract_address: str, k: Optional[int] = None):
    return gw.system.protocol.revoke_link(principal.address, contract_address, k)


@register_operation("protocol.rotate_id")
def rotate_id(gw: Gateway, principal: Principal, contract_address: str, k: Optional[int] = None):
    return gw.system.protocol.rotate_id(principal.address, contract_address, k)


@register_operation("protocol.grant_access")
def grant_access(
    gw: Gateway, principal: Principal, contract_address: str, grantee: str, republish: bool = False
):
    return gw.system.protocol.grant_access(principal.address, contract_address, grantee, republish)


@register_operation("protocol.received_grants")
def received_grants(gw: Gateway, principal: Principal):
    return gw.system.protocol.received_grants(principal.address)


@register_operation("protocol.own_records")
def own_records(gw: Gateway, principal: Principal, contract_address: str):
    return gw.system.protocol.own_records(principal.address, contract_address)


@register_operation("protocol.fetch_messages")
def fetch_messages(gw: Gateway, principal: Principal, contract_address: Optional[str] = None):
    return gw.system.protocol.fetch_messages(principal.address, contract_address)


@register_operation("protocol.resolve_identity")
def resolve_identity(
    gw: Gateway,
    principal: Principal,
    contract_address: str,
    purpose: str = "",
    requested_fields: Optional[List[str]] = None,
):
    return gw.system.protocol.resolve_identity(principal.address, contract_address, purpose, requested_fields)


@register_operation("protocol.consent_result")
def consent_result(gw: Gateway, principal: Principal, request_id: str):
    return gw.system.protocol.consent_result(principal.address, request_id)


@register_operation("protocol.search_candidates")
def search_candidates(
    gw: Gateway,
    principal: Principal,
    query_name: str,
    params: Optional[Dict[str, Any]] = None,
    purpose: str = "",
    requested_fields: Optional[List[str]] = None,
):
    return gw.system.protocol.search_candidates(principal.address, query_name, params, purpose, requested_fields)


@register_operation("protocol.lookup_by_identity")
def lookup_by_identity(gw: Gateway, principal: Principal, criteria: Dict[str, Any]):
    return gw.system.protocol.lookup_by_identity(principal.address, criteria)


@register_operation("protocol.send_message")
def send_message(gw: Gateway, principal: Principal, contract_address: str, body: str) -> Dict[str, str]:
    message_id = gw.system.protocol.send_message(principal.address, contract_address, body, principal.role)
    return {"message_id": message_id}


@register_operation("protocol.nudge_candidates")
def nudge_candidates(
    gw: Gateway, principal: Principal, query_name: str, body: str, params: Optional[Dict[str, Any]] = None
) -> Dict[str, List[str]]:
    """Anonymously message every contract a whitelisted query matches."""
    protocol = gw.system.protocol
    ids = protocol.nudge_candidates(principal.address, query_name, params, body, principal.role, principal.role)
    return {"message_ids": ids}


# -- vault ---------------------------------------------------------------------------------


@register_operation("vault.reveal_contract_address")
def reveal_contract_address(gw: Gateway, principal: Principal, to: str) -> Dict[str, Optional[str]]:
    return {"to": to, "contract_address": gw.owner_vault(principal).reveal_contract_address(to)}


@register_operation("vault.decisions")
def vault_decisions(gw: Gateway, principal: Principal) -> Any:
    return canonical_loads(gw.owner_vault(principal).export_decisions())


@register_operation("vault.set_policy")
def set_policy(gw: Gateway, principal: Principal, policy: Any) -> Dict[str, Any]:
    vault = gw.owner_vault(principal)
    vault.policy = make_policy(policy)
    return vault.policy.describe()


def operation_names() -> List[str]:
    return sorted(OPERATIONS)


def get_operation(name: str) -> Operation:
    operation = OPERATIONS.get(name)
    if operation is None:
        raise NotFoundError(f"unknown operation '{name}'")
    return operation
