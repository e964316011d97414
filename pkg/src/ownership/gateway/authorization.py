"""
Static role-based access control.

Operations are named ``module.op``. Anything missing from ``ROLE_MATRIX`` is
denied for every role.
"""

from enum import Enum
from types import MappingProxyType
from typing import FrozenSet, Mapping

from ..models import Role
from .principals import Principal


class Decision(str, Enum):
    ALLOW = "allow"
    DENY = "deny"


_LEDGER_READS = frozenset({"ledger.read_contract", "ledger.directory_lookup"})

ROLE_MATRIX: Mapping[Role, FrozenSet[str]] = MappingProxyType(
    {
        Role.CUSTODIAN: _LEDGER_READS
        | {
            "ledger.export_log",
            "identity_store.tumble",
            "identity_store.tumble_chaff",
            "identity_store.mutation_feed",
            "identity_store.export_snapshot",
            "record_store.create_record",
            "record_store.append_version",
            "record_store.query",
            "record_store.reverse_lookup",
            "record_store.get_record",
            "record_store.manage_whitelist",
            "record_store.whitelist_history",
            "record_store.export_snapshot",
            "protocol.register_user",
            "protocol.update_identity",
            "protocol.issue_claim_token",
            "protocol.ownership_state",
            "protocol.resolve_identity",
            "protocol.consent_result",
            "protocol.search_candidates",
            "protocol.send_message",
            "protocol.nudge_candidates",
        },
        Role.DATA_OWNER: _LEDGER_READS
        | {
            "ledger.set_access_flag",
            "protocol.claim_weak",
            "protocol.claim_strong",
            "protocol.revoke_link",
            "protocol.rotate_id",
            "protocol.grant_access",
            "protocol.own_records",
            "protocol.fetch_messages",
            "protocol.ownership_state",
            "vault.reveal_contract_address",
            "vault.decisions",
            "vault.set_policy",
        },
        Role.THIRD_PARTY: _LEDGER_READS
        | {
            "identity_store.mutation_feed",
            "record_store.query",
            "record_store.reverse_lookup",
            "protocol.resolve_identity",
            "protocol.consent_result",
            "protocol.search_candidates",
            "protocol.lookup_by_identity",
            "protocol.send_message",
            "protocol.received_grants",
        },
        Role.ADMIN: frozenset({"gateway.register_principal"}),
    }
)


def authorize(principal: Principal, operation: str) -> Decision:
    """Pure lookup in the role matrix."""
    if operation in ROLE_MATRIX.get(principal.role, frozenset()):
        return Decision.ALLOW
    return Decision.DENY


def permitted_operations(role: Role) -> FrozenSet[str]:
    return ROLE_MATRIX.get(role, frozenset())
