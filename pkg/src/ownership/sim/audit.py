"""
Trace auditor.

Re-checks the cross-plane invariants over a finished run using only the event
trace (plus, optionally, the record-store snapshots). Every check reports
pass/fail and, on failure, the trace sequence numbers of the offending events.
"""

from typing import Any, Dict, Iterable, List, Mapping, Optional, Set

import structlog
from pydantic import BaseModel, Field

from ..canonical import canonical_loads, digest
from ..errors import OwnershipError
from ..ledger import Ledger, Transaction
from ..models import ALLOWED_TRANSITIONS, OwnershipState
from ..record_store import denylisted_fields
from ..trace import EventTrace, TraceEvent

logger = structlog.get_logger(__name__)

CHECKS = (
    "state_machine",
    "ownership_exclusion",
    "directory_claim",
    "authorization_soundness",
    "atomicity",
    "searchability",
    "replay_determinism",
    "deidentification",
)


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""
    counterexamples: List[int] = Field(default_factory=list, description="trace seq of offending events")


class AuditReport(BaseModel):
    checks: Dict[str, CheckResult]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def failed(self) -> List[str]:
        return [name for name, c in self.checks.items() if not c.passed]

    def check(self, name: str) -> CheckResult:
        return self.checks[name]


def _ok(name: str, detail: str = "") -> CheckResult:
    return CheckResult(name=name, passed=True, detail=detail)


def _fail(name: str, detail: str, seqs: Iterable[int] = ()) -> CheckResult:
    return CheckResult(name=name, passed=False, detail=detail, counterexamples=sorted(set(seqs)))


def _genesis(events: List[TraceEvent]) -> Dict[str, Any]:
    for event in events:
        if event.plane == "sim" and event.kind == "genesis":
            return event.data
    return {}


def _tx(event: TraceEvent) -> Transaction:
    return Transaction.model_validate(event.data["tx"])


# -- individual checks ----------------------------------------------------------------


def check_state_machine(events: List[TraceEvent]) -> CheckResult:
    current: Dict[str, str] = {}
    bad: List[int] = []
    for event in events:
        if event.plane != "protocol" or event.kind != "state":
            continue
        contract, before, after = event.data["contract"], event.data.get("from"), event.data["to"]
        if contract not in current:
            if before is not None or after != OwnershipState.CUSTODIAN_HELD.value:
                bad.append(event.seq)
        elif before != current[contract]:
            bad.append(event.seq)
        elif (OwnershipState(before), OwnershipState(after)) not in ALLOWED_TRANSITIONS:
            bad.append(event.seq)
        current[contract] = after
    if bad:
        return _fail("state_machine", "transition outside the ownership state machine", bad)
    return _ok("state_machine", f"{len(current)} contracts")


def check_ownership_exclusion(events: List[TraceEvent]) -> CheckResult:
    """Identification after a claim needs a grant (revoked) or an owner approval (strong)."""
    state: Dict[str, str] = {}
    vault_of: Dict[str, str] = {}
    grants: Set[tuple] = set()
    approvals: Set[tuple] = set()
    bad: List[int] = []
    for event in events:
        if event.plane == "protocol" and event.kind == "state":
            state[event.data["contract"]] = event.data["to"]
        elif event.plane == "ledger" and event.kind == "tx":
            tx = _tx(event)
            if tx.kind.value == "set_vault":
                vault_of[tx.body["contract"]] = tx.body["vault_address"]
        elif event.plane == "protocol" and event.kind == "grant":
            grants.add((event.data["contract"], event.data["grantee"]))
        elif event.plane == "vault" and event.kind == "consent_decision":
            if event.data.get("approved"):
                approvals.add((event.actor, event.data["requester"]))
        elif event.plane == "protocol" and event.kind == "resolution":
            if event.data["outcome"] != "identified":
                continue
            contract, requester = event.data["contract"], event.data["requester"]
            now = state.get(contract)
            if now == OwnershipState.CLAIMED_WEAK_REVOKED.value and (contract, requester) not in grants:
                bad.append(event.seq)
            elif now == OwnershipState.CLAIMED_STRONG.value and (vault_of.get(contract), requester) not in approvals:
                bad.append(event.seq)
    if bad:
        return _fail("ownership_exclusion", "identified without the owner's grant or consent", bad)
    return _ok("ownership_exclusion")


def check_directory_claim(events: List[TraceEvent], custodians: Set[str]) -> CheckResult:
    """After a claim, only ids the new owner re-published may map to the contract."""
    owner: Dict[str, str] = {}
    directory: Dict[str, Optional[str]] = {}
    republished: Dict[str, Set[str]] = {}
    bad: List[int] = []
    for event in events:
        if event.plane != "ledger" or event.kind != "tx":
            continue
        tx = _tx(event)
        body = tx.body
        kind = tx.kind.value
        if kind == "deploy":
            owner[digest({"deployer": tx.signer, "sequence_number": tx.sequence_number})] = tx.signer
        elif kind == "transfer":
            owner[body["contract"]] = body["new_owner"]
            if body["new_owner"] not in custodians:
                republished[body["contract"]] = set()
        elif kind == "directory_put":
            directory[body["entry_id"]] = body["contract"]
            if body["contract"] in republished and tx.signer == owner.get(body["contract"]):
                republished[body["contract"]].add(body["entry_id"])
        elif kind == "directory_clear":
            for entry_id in body.get("entry_ids") or []:
                directory[entry_id] = None
        for entry_id, contract in directory.items():
            if contract in republished and entry_id not in republished[contract]:
                bad.append(event.seq)
                break
    if bad:
        return _fail("directory_claim", "claimed contract still reachable through a pre-claim id", bad)
    return _ok("directory_claim", f"{len(republished)} claimed contracts")


def check_authorization_soundness(events: List[TraceEvent], custodians: Set[str]) -> CheckResult:
    """Every logged transaction re-verifies against a fresh ledger."""
    ledger = Ledger(custodians=custodians)
    for event in events:
        if event.plane != "ledger" or event.kind != "tx":
            continue
        try:
            ledger.apply(_tx(event))
        except OwnershipError as exc:
            return _fail(
                "authorization_soundness",
                f"transaction at step {event.seq} rejected on replay: {exc.message}",
                [event.seq],
            )
        except ValueError as exc:
            return _fail("authorization_soundness", f"malformed transaction at step {event.seq}: {exc}", [event.seq])
    return _ok("authorization_soundness", f"{len(ledger)} transactions")


def check_atomicity(events: List[TraceEvent]) -> CheckResult:
    """Each strong claim leaves the payload in exactly one of store and vault."""
    bad: List[int] = []
    open_saga: Optional[TraceEvent] = None
    deleted = restored = ingested = cleared = False
    for event in events:
        if event.plane == "protocol" and event.kind == "saga" and event.data.get("saga") == "claim_strong":
            status = event.data["status"]
            if status == "begin":
                if open_saga is not None:
                    bad.append(open_saga.seq)
                open_saga = event
                deleted = restored = ingested = cleared = False
                continue
            if open_saga is None:
                bad.append(event.seq)
                continue
            store_has = (not deleted) or restored
            vault_has = ingested and not cleared
            if store_has == vault_has:
                bad.append(event.seq)
            elif status == "committed" and not vault_has:
                bad.append(event.seq)
            elif status == "compensated" and not store_has:
                bad.append(event.seq)
            open_saga = None
        elif open_saga is not None:
            if event.plane == "identity" and event.kind == "deleted":
                deleted = True
            elif event.plane == "identity" and event.kind == "restored":
                restored = True
            elif event.plane == "vault" and event.kind == "ingested":
                ingested = True
            elif event.plane == "vault" and event.kind == "cleared":
                cleared = True
    if open_saga is not None:
        bad.append(open_saga.seq)
    if bad:
        return _fail("atomicity", "strong claim left the payload in both places or neither", bad)
    return _ok("atomicity")


def check_searchability(events: List[TraceEvent], snapshots: Optional[Mapping[str, bytes]]) -> CheckResult:
    """Every created record stays keyed to its contract on every node."""
    if snapshots is None:
        return _ok("searchability", "no snapshots supplied")
    created = {
        e.data["record_id"]: (e.seq, e.data["contract_address"])
        for e in events
        if e.plane == "record" and e.kind == "created"
    }
    bad: List[int] = []
    for node, raw in snapshots.items():
        present = {r["record_id"]: r["contract_address"] for r in canonical_loads(raw)}
        for record_id, (seq, contract) in created.items():
            if present.get(record_id) != contract:
                bad.append(seq)
    if bad:
        return _fail("searchability", "record missing or re-keyed on some node", bad)
    return _ok("searchability", f"{len(created)} records on {len(snapshots)} nodes")


def check_replay_determinism(events: List[TraceEvent], custodians: Set[str]) -> CheckResult:
    final = [e for e in events if e.plane == "sim" and e.kind == "final"]
    txs = [_tx(e) for e in events if e.plane == "ledger" and e.kind == "tx"]
    try:
        replayed = Ledger.replay(txs, custodians)
    except (OwnershipError, ValueError) as exc:
        return _fail("replay_determinism", f"replay failed: {exc}")
    if not final:
        return _ok("replay_determinism", "no recorded final state")
    expected = final[-1].data.get("ledger_digest")
    if replayed.state_digest() != expected:
        return _fail("replay_determinism", "replayed ledger state differs from the recorded state", [final[-1].seq])
    return _ok("replay_determinism", replayed.state_digest())


def check_deidentification(snapshots: Optional[Mapping[str, bytes]], denylist: Iterable[str]) -> CheckResult:
    if snapshots is None:
        return _ok("deidentification", "no snapshots supplied")
    names = {f.lower() for f in denylist}
    hits: Dict[str, List[str]] = {}
    for node, raw in snapshots.items():
        for record in canonical_loads(raw):
            for version in record.get("versions", []):
                found = denylisted_fields(version.get("payload"), names)
                if found:
                    hits.setdefault(node, []).extend(found)
    if hits:
        summary = "; ".join(f"{node}: {', '.join(sorted(set(f)))}" for node, f in sorted(hits.items()))
        return _fail("deidentification", f"identifying fields in record snapshots ({summary})")
    return _ok("deidentification")


# -- entry point ---------------------------------------------------------------------------


def audit_trace(
    trace: EventTrace,
    snapshots: Optional[Mapping[str, bytes]] = None,
    custodians: Optional[Iterable[str]] = None,
    denylist: Optional[Iterable[str]] = None,
) -> AuditReport:
    """
    Machine-check the cross-plane invariants of a run.

    Args:
        trace: Event trace of the run
        snapshots: Record-store snapshots by node id, for the record checks
        custodians: Genesis custodian addresses; read from ``sim.genesis`` if omitted
        denylist: Identifying field names; read from ``sim.genesis`` if omitted

    Returns:
        Pass/fail per check with offending trace steps
    """
    events = trace.events
    genesis = _genesis(events)
    custodian_set = set(custodians if custodians is not None else genesis.get("custodians", []))
    names = list(denylist if denylist is not None else genesis.get("identifying_fields", []))

    results = [
        check_state_machine(events),
        check_ownership_exclusion(events),
        check_directory_claim(events, custodian_set),
        check_authorization_soundness(events, custodian_set),
        check_atomicity(events),
        check_searchability(events, snapshots),
        check_replay_determinism(events, custodian_set),
        check_deidentification(snapshots, names),
    ]
    report = AuditReport(checks={r.name: r for r in results})
    logger.info("sim.audit", passed=report.passed, failed=report.failed())
    return report
