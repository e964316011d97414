"""
End-to-end runs of the bundled scenarios.
"""

import orjson
import pytest

from ownership.sim.audit import audit_trace
from ownership.sim.runner import run_scenario
from ownership.sim.scenario import bundled_scenario_path
from ownership.trace import EventTrace


@pytest.fixture(scope="module")
def academic():
    return run_scenario(bundled_scenario_path("academic"))


@pytest.fixture(scope="module")
def medical():
    return run_scenario(bundled_scenario_path("medical"))


def failed_assertions(run):
    return [f"{a.name}: {a.detail}" for a in run.report.assertions if not a.passed]


class TestAcademicScenario:
    """University marks, employer checks and an anonymous bursary offer."""

    def test_passes(self, academic):
        assert academic.report.failures == []
        assert failed_assertions(academic) == []
        assert academic.passed

    def test_audit_is_clean(self, academic):
        assert academic.report.audit.passed, academic.report.audit.failed()

    def test_every_resolution_before_revocation_identifies(self, academic):
        outcomes = academic.outcome("employer-before-revoke").results
        assert len(outcomes) == 100
        assert {o["outcome"] for o in outcomes} == {"identified"}

    def test_no_resolution_after_revocation_identifies(self, academic):
        outcomes = academic.outcome("employer-after-revoke").results
        assert len(outcomes) == 100
        assert {(o["outcome"], o["reason"]) for o in outcomes} == {("denied", "link_broken")}

    def test_revocation_was_attacked(self, academic):
        strategies = {(r.strategy, r.include_directory) for r in academic.report.attacks}
        assert ("uniform", True) in strategies
        assert all(r.trials >= 1 for r in academic.report.attacks)

    def test_public_view_holds_no_personal_values(self, academic):
        public = b"".join(orjson.dumps(e.model_dump(mode="json")) for e in academic.trace.public_events())
        for value in (b"Alice Moreau", b"alice.moreau@example.org", b"INS-100-2001"):
            assert value not in public


class TestMedicalScenario:
    """Two hospitals, a strong claim across an injected fault and consented identification."""

    def test_passes(self, medical):
        assert medical.report.failures == []
        assert failed_assertions(medical) == []
        assert medical.passed

    def test_faulted_claim_left_a_compensated_saga(self, medical):
        sagas = [e.data for e in medical.trace.select("protocol", "saga") if e.data["saga"] == "claim_strong"]
        assert [s["status"] for s in sagas].count("compensated") == 1
        assert sagas[-1]["status"] == "committed"

    def test_nodes_converged(self, medical):
        [final] = medical.trace.select("sim", "final")
        digests = set(final.data["record_digests"].values())
        assert len(digests) == 1

    def test_network_faults_were_exercised(self, medical):
        assert medical.report.network["sent"] > 0
        assert medical.system.consortium.pending() == 0

    def test_chaff_tumbled_on_schedule(self, medical):
        chaff = medical.trace.select("identity", "chaff_tumble")
        assert chaff and all(e.private for e in chaff)
        public = {(e.data["store"], e.data["batch_id"]) for e in medical.trace.select("identity", "rekey_batch")}
        assert {(e.data["store"], e.data["batch_id"]) for e in chaff} <= public

    def test_trace_audits_offline(self, medical):
        restored = EventTrace.from_ndjson(medical.trace.to_ndjson())
        assert restored.fingerprint() == medical.trace.fingerprint()
        assert audit_trace(restored).passed


def test_runs_are_reproducible():
    first = run_scenario(bundled_scenario_path("medical"))
    second = run_scenario(bundled_scenario_path("medical"))
    assert first.trace.to_ndjson() == second.trace.to_ndjson()
    assert first.report.model_dump() == second.report.model_dump()
