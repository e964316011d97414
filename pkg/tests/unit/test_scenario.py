"""
Tests for scenario parsing, the seeded network and the scenario runner.
"""

import copy

import orjson
import pytest

from ownership.errors import ScenarioError
from ownership.sim.network import SeededNetwork
from ownership.sim.runner import ScenarioRunner, extract, run_scenario
from ownership.sim.scenario import NetworkModel, bundled_scenario_path, load_scenario, parse_scenario

BASE = {
    "name": "tiny",
    "seed": 3,
    "actors": [
        {"name": "clinic", "role": "custodian", "custodian": "custodian-a"},
        {"name": "owner", "role": "data_owner", "seed": "owner", "policy": "always-approve"},
        {"name": "lab", "role": "third_party", "seed": "lab"},
    ],
    "steps": [
        {
            "at": 0,
            "actor": "clinic",
            "op": "protocol.register_user",
            "id": "register",
            "params": {"payload": {"name": "Ines Costa", "email": "ines@example.org", "insurance_number": "INS-1"}},
            "save": {"contract": "contract_address"},
        },
        {
            "at": 5,
            "actor": "lab",
            "op": "protocol.ownership_state",
            "id": "state",
            "params": {"contract_address": "$contract"},
            "expect_error": "forbidden",
        },
        {
            "at": 6,
            "actor": "clinic",
            "op": "protocol.ownership_state",
            "id": "clinic-state",
            "params": {"contract_address": "$contract"},
        },
    ],
    "assertions": [
        {"name": "custodian holds it", "step": "clinic-state", "path": "state", "equals": "custodian_held"},
        {"name": "lab is refused", "step": "state", "error": "forbidden"},
        {"name": "audit", "audit": "all"},
    ],
}


def doc(**changes):
    raw = copy.deepcopy(BASE)
    raw.update(changes)
    return raw


def text(raw) -> str:
    return orjson.dumps(raw).decode("utf-8")


def test_parse_valid_scenario():
    scenario = parse_scenario(text(BASE))
    assert scenario.name == "tiny"
    assert [s.id for s in scenario.steps] == ["register", "state", "clinic-state"]
    assert scenario.actor("lab").seed == "lab"
    with pytest.raises(ScenarioError):
        scenario.actor("nobody")


def test_syntax_error_reports_line():
    with pytest.raises(ScenarioError) as exc_info:
        parse_scenario('{\n  "name": "x",\n  "steps": [\n}', source="broken.json")
    assert exc_info.value.line == 4
    assert exc_info.value.message.startswith("broken.json: line 4:")


def test_scenario_must_be_an_object():
    with pytest.raises(ScenarioError) as exc_info:
        parse_scenario("[]")
    assert exc_info.value.line == 1


@pytest.mark.parametrize(
    "changes,message",
    [
        ({"steps": [{"at": 0, "actor": "ghost", "op": "protocol.register_user"}]}, "unknown actor"),
        (
            {
                "steps": [
                    {"at": 5, "actor": "clinic", "op": "protocol.register_user"},
                    {"at": 2, "actor": "clinic", "op": "protocol.register_user"},
                ]
            },
            "back in time",
        ),
        ({"steps": [{"op": "sim.teleport"}]}, "unknown simulator operation"),
        ({"steps": [{"op": "register_user", "actor": "clinic"}]}, "module.op"),
        (
            {"steps": [{"op": "sim.settle", "id": "a"}, {"op": "sim.settle", "id": "a"}], "assertions": []},
            "unique",
        ),
        ({"assertions": [{"name": "x", "step": "missing", "equals": 1}]}, "unknown step"),
        ({"assertions": [{"name": "x"}]}, "step or an audit"),
        ({"actors": [{"name": "clinic", "role": "custodian"}], "steps": [], "assertions": []}, "custodian"),
        ({"actors": [{"name": "lab", "role": "third_party"}], "steps": [], "assertions": []}, "seed"),
        ({"actors": [{"name": "sim", "role": "admin"}], "steps": [], "assertions": []}, "reserved"),
        ({"colour": "blue"}, "colour"),
    ],
)
def test_invalid_scenarios(changes, message):
    with pytest.raises(ScenarioError, match=message):
        parse_scenario(text(doc(**changes)))


def test_load_scenario_from_disk(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(text(BASE))
    assert load_scenario(path).name == "tiny"
    with pytest.raises(ScenarioError, match="cannot read"):
        load_scenario(tmp_path / "absent.json")


def test_bundled_scenarios():
    assert bundled_scenario_path("academic").name == "academic.json"
    assert load_scenario(bundled_scenario_path("medical")).name == "medical"
    with pytest.raises(ScenarioError):
        bundled_scenario_path("astronomy")


def test_network_is_seeded():
    model = NetworkModel.model_validate(
        {"delay": {"kind": "uniform", "low": 1, "high": 30}, "reorder_probability": 0.5, "loss_probability": 0.2}
    )
    first, second = SeededNetwork(model, seed=1), SeededNetwork(model, seed=1)
    assert [first.delay() for _ in range(50)] == [second.delay() for _ in range(50)]
    assert [first.pick(4) for _ in range(50)] == [second.pick(4) for _ in range(50)]
    assert first.stats() == second.stats()
    assert first.stats()["sent"] == 50


def test_quiet_network():
    network = SeededNetwork(NetworkModel.model_validate({"delay": {"kind": "constant", "ms": 7}}))
    assert {network.delay() for _ in range(10)} == {7}
    assert network.pick(5) == 0
    assert not network.duplicate()
    assert network.stats() == {"sent": 10, "retransmissions": 0, "reordered": 0, "duplicated": 0}


def test_losses_cost_retransmission_timeouts():
    model = NetworkModel.model_validate({"loss_probability": 0.5, "retransmit_ms": 100})
    network = SeededNetwork(model, seed=4)
    delays = [network.delay() for _ in range(200)]
    assert all(d % 100 == 0 for d in delays)
    assert sum(delays) == 100 * network.stats()["retransmissions"]


def test_extract_paths():
    value = {"rows": [{"contract_address": "c1"}, {"contract_address": "c2"}], "count": 2}
    assert extract(value, "rows.1.contract_address") == "c2"
    assert extract(value, "rows.-1.contract_address") == "c2"
    assert extract(value, "") is value
    assert extract(value, "count") == 2
    missing = extract(value, "nothing")
    assert extract(value, "rows.5") is missing
    assert extract(value, "count.deeper") is missing


def test_runner_passes_tiny_scenario():
    run = run_scenario(parse_scenario(text(BASE)))
    assert run.passed, run.report.failures + [a.detail for a in run.report.assertions if not a.passed]
    assert run.report.steps == 3
    assert run.outcome("state").errors == ["forbidden"]
    assert run.trace.select("sim", "genesis")[0].data["seed"] == 3
    assert run.trace.select("sim", "final")
    with pytest.raises(KeyError):
        run.outcome("missing")


def test_failed_assertion_fails_the_run():
    raw = doc()
    raw["assertions"] = [{"name": "wrong state", "step": "clinic-state", "path": "state", "equals": "claimed_strong"}]
    report = run_scenario(parse_scenario(text(raw))).report
    assert not report.passed
    assert report.failures == []
    assert "claimed_strong" in report.assertions[0].detail


def test_unexpected_error_is_a_step_failure():
    raw = doc(assertions=[])
    del raw["steps"][1]["expect_error"]
    report = run_scenario(parse_scenario(text(raw))).report
    assert not report.passed
    assert any("forbidden" in f for f in report.failures)


def test_unresolved_variable_is_reported():
    raw = doc(assertions=[])
    raw["steps"][2]["params"]["contract_address"] = "$never_saved"
    report = run_scenario(parse_scenario(text(raw))).report
    assert any("never_saved" in f for f in report.failures)


def test_repeat_runs_step_several_times():
    raw = doc(assertions=[])
    raw["steps"][2]["repeat"] = 4
    run = run_scenario(parse_scenario(text(raw)))
    assert len(run.outcome("clinic-state").results) == 4


def test_substitution_of_actor_addresses():
    runner = ScenarioRunner(parse_scenario(text(BASE)))
    runner.setup_actors()
    runner.saved["x"] = 1
    resolved = runner.substitute({"to": "@lab", "values": ["$x", "plain", "$"]})
    assert resolved["to"] == runner.signers["lab"].address
    assert resolved["values"] == [1, "plain", "$"]
    with pytest.raises(ScenarioError):
        runner.substitute("@ghost")


def test_same_scenario_same_trace():
    scenario = parse_scenario(text(BASE))
    assert run_scenario(scenario).trace.fingerprint() == run_scenario(scenario).trace.fingerprint()
