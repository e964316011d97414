"""
Tests for the trace auditor.
"""

import pytest

from ownership.canonical import canonical_json
from ownership.errors import InjectedFault
from ownership.sim.audit import CHECKS, audit_trace
from ownership.trace import EventTrace


@pytest.fixture
def busy(system, custodian_a, populated, alice_vault, claimed):
    """A run touching every plane: records, a revoke, a grant and a strong claim after a fault."""
    protocol = system.protocol
    for name, mark in {"alice": 90, "bob": 80}.items():
        system.consortium.create_record(custodian_a, populated[name][1], [], "mark", {"course": "CS101", "mark": mark})
    protocol.revoke_link(alice_vault.address, claimed)
    protocol.grant_access(alice_vault.address, claimed, "doctor")
    protocol.resolve_identity("doctor", claimed)
    protocol.resolve_identity("employer", claimed)
    protocol.faults.arm("after_ingest")
    with pytest.raises(InjectedFault):
        protocol.claim_strong(alice_vault.address, claimed)
    protocol.claim_strong(alice_vault.address, claimed)
    protocol.resolve_identity("doctor", claimed, requested_fields=["name"])
    system.settle()
    return system


def audit(system, trace=None, snapshots=None):
    return audit_trace(
        trace or system.trace,
        snapshots=system.consortium.snapshots() if snapshots is None else snapshots,
        custodians=system.settings.custodian_addresses,
        denylist=system.settings.identifying_fields,
    )


def rebuilt(events):
    return EventTrace.from_events(events)


def test_clean_run_passes_every_check(busy):
    report = audit(busy)
    assert set(report.checks) == set(CHECKS)
    assert report.passed, report.failed()


def test_state_machine_violation(busy, claimed):
    trace = rebuilt(busy.trace.events)
    bad = trace.record("protocol", "state", {"contract": claimed, "from": "claimed_strong", "to": "custodian_held"})
    report = audit(busy, trace)
    assert report.failed() == ["state_machine"]
    assert report.check("state_machine").counterexamples == [bad.seq]


def test_identification_without_grant_is_flagged(system, alice_vault, claimed):
    system.protocol.revoke_link(alice_vault.address, claimed)
    trace = rebuilt(system.trace.events)
    trace.record(
        "protocol",
        "resolution",
        {"contract": claimed, "requester": "stranger", "outcome": "identified", "fields": ["name"]},
    )
    assert "ownership_exclusion" in audit(system, trace).failed()


def test_tampered_transaction_fails_soundness_and_replay(busy):
    events = busy.trace.events
    index = next(
        i for i, e in enumerate(events) if e.plane == "ledger" and e.kind == "tx" and e.data["tx"]["kind"] == "transfer"
    )
    tx = dict(events[index].data["tx"])
    tx["body"] = {**tx["body"], "new_owner": "ab" * 32}
    events[index] = events[index].model_copy(update={"data": {"tx": tx}})
    report = audit(busy, rebuilt(events))
    assert not report.check("authorization_soundness").passed
    assert report.check("authorization_soundness").counterexamples == [events[index].seq]
    assert not report.check("replay_determinism").passed


def test_final_digest_mismatch(busy):
    trace = rebuilt(busy.trace.events)
    trace.record("sim", "final", {"ledger_digest": "00" * 32})
    assert audit(busy, trace).failed() == ["replay_determinism"]


def test_matching_final_digest_passes(busy):
    trace = rebuilt(busy.trace.events)
    trace.record("sim", "final", {"ledger_digest": busy.ledger.state_digest()})
    assert audit(busy, trace).check("replay_determinism").passed


def test_republished_pre_claim_id_is_flagged(busy, populated, custodian_a):
    entry_id, contract = populated["alice"]
    trace = rebuilt(busy.trace.events)
    trace.record(
        "ledger",
        "tx",
        {
            "tx": {
                "sequence_number": len(busy.ledger) + 1,
                "signer": custodian_a.address,
                "public_key": custodian_a.public_key_hex,
                "kind": "directory_put",
                "body": {"entry_id": entry_id, "contract": contract},
                "signature": "",
            }
        },
    )
    assert not audit(busy, trace).check("directory_claim").passed


def test_unfinished_saga_breaks_atomicity(busy, claimed):
    trace = rebuilt(busy.trace.events)
    trace.record("protocol", "saga", {"saga": "claim_strong", "status": "begin", "contract": claimed})
    trace.record("identity", "deleted", {"store": "ids://custodian-a"})
    assert "atomicity" in audit(busy, trace).failed()


def test_missing_record_breaks_searchability(busy):
    snapshots = dict(busy.consortium.snapshots())
    snapshots["custodian-b"] = canonical_json([])
    assert audit(busy, snapshots=snapshots).failed() == ["searchability"]


def test_identifying_field_in_snapshot(busy):
    snapshots = dict(busy.consortium.snapshots())
    leaked = [
        {"record_id": "r", "contract_address": "c", "versions": [{"payload": {"nested": {"Email": "a@b"}}}]}
    ]
    snapshots["rogue"] = canonical_json(leaked)
    report = audit(busy, snapshots=snapshots)
    assert not report.check("deidentification").passed
    assert "Email" in report.check("deidentification").detail


def test_record_checks_skip_without_snapshots(busy):
    report = audit_trace(
        busy.trace,
        custodians=busy.settings.custodian_addresses,
        denylist=busy.settings.identifying_fields,
    )
    assert report.check("searchability").detail == "no snapshots supplied"
    assert report.passed
