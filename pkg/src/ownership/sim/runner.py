"""
Scenario runner.

Builds a fresh in-process system for a scenario, drives every actor's steps
through the gateway as signed envelopes over simulated time, then settles the
network, audits the trace and evaluates the scenario's assertions. The run is
a pure function of the scenario: same file, same seed, same trace bytes.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import structlog
from pydantic import BaseModel, Field

from ..canonical import sha256_hex
from ..config import load_settings
from ..crypto import KeyPair
from ..errors import OwnershipError, ScenarioError
from ..gateway.envelopes import EnvelopeSigner
from ..gateway.service import Gateway
from ..models import Role
from ..system import System
from ..trace import EventTrace
from .adversary import AttackReport, evaluate_attacks
from .audit import AuditReport, audit_trace
from .network import SeededNetwork
from .scenario import AssertionSpec, Scenario, StepSpec, load_scenario

logger = structlog.get_logger(__name__)

_MISSING = object()


class AssertionResult(BaseModel):
    name: str
    passed: bool
    detail: str = ""


class ScenarioReport(BaseModel):
    name: str
    seed: int
    passed: bool
    steps: int
    failures: List[str] = Field(default_factory=list)
    assertions: List[AssertionResult] = Field(default_factory=list)
    audit: AuditReport
    attacks: List[AttackReport] = Field(default_factory=list)
    network: Dict[str, int] = Field(default_factory=dict)


@dataclass
class StepOutcome:
    index: int
    step: StepSpec
    results: List[Any] = field(default_factory=list)
    errors: List[Optional[str]] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(e is not None for e in self.errors)


@dataclass
class ScenarioRun:
    scenario: Scenario
    system: System
    gateway: Gateway
    outcomes: List[StepOutcome]
    report: ScenarioReport

    @property
    def trace(self) -> EventTrace:
        return self.system.trace

    @property
    def passed(self) -> bool:
        return self.report.passed

    def outcome(self, step_id: str) -> StepOutcome:
        for outcome in self.outcomes:
            if outcome.step.id == step_id:
                return outcome
        raise KeyError(step_id)


def extract(value: Any, path: str) -> Any:
    """Walk a dotted path (``rows.0.contract_address``) through dicts and lists."""
    if not path:
        return value
    for part in path.split("."):
        if isinstance(value, dict) and part in value:
            value = value[part]
        elif isinstance(value, list) and part.lstrip("-").isdigit() and -len(value) <= int(part) < len(value):
            value = value[int(part)]
        else:
            return _MISSING
    return value


class ScenarioRunner:
    """Executes one scenario against a fresh system."""

    def __init__(self, scenario: Scenario, config_path: Optional[str | Path] = None):
        self.scenario = scenario
        settings = load_settings(config_path, **{**scenario.settings, "seed": scenario.seed})
        self.network = SeededNetwork(scenario.network, scenario.seed)
        self.system = System(settings, delivery=self.network)
        self.system.trace.record(
            "sim",
            "genesis",
            {
                "scenario": scenario.name,
                "seed": scenario.seed,
                "custodians": settings.custodian_addresses,
                "identifying_fields": list(settings.identifying_fields),
            },
        )
        self.gateway = Gateway(self.system)
        self.admin = EnvelopeSigner(KeyPair.from_seed(settings.admin_seed))
        self.signers: Dict[str, EnvelopeSigner] = {}
        self.addresses: Dict[str, str] = {}
        self.saved: Dict[str, Any] = {}
        self.failures: List[str] = []
        self.outcomes: List[StepOutcome] = []
        self._next_chaff_tumble = settings.chaff_tumble_every_ms

    # -- references --------------------------------------------------------------

    def substitute(self, value: Any) -> Any:
        """Replace ``"$var"`` with saved values and ``"@actor"`` with addresses."""
        if isinstance(value, dict):
            return {k: self.substitute(v) for k, v in value.items()}
        if isinstance(value, list):
            return [self.substitute(v) for v in value]
        if isinstance(value, str) and len(value) > 1:
            if value[0] == "$":
                if value[1:] not in self.saved:
                    raise ScenarioError(f"unresolved variable '{value}'")
                return self.saved[value[1:]]
            if value[0] == "@":
                if value[1:] not in self.addresses:
                    raise ScenarioError(f"unknown actor reference '{value}'")
                return self.addresses[value[1:]]
        return value

    # -- setup -------------------------------------------------------------------

    def _admin_call(self, operation: str, params: Dict[str, Any]) -> Any:
        return self.gateway.handle(self.admin.sign(operation, params))

    def setup_actors(self) -> None:
        for actor in self.scenario.actors:
            if actor.role == Role.CUSTODIAN:
                self.addresses[actor.name] = self.system.custodian(actor.custodian or "").address
            elif actor.role == Role.ADMIN:
                self.addresses[actor.name] = self.admin.address
            else:
                self.addresses[actor.name] = KeyPair.from_seed(actor.seed or "").address

        for actor in self.scenario.actors:
            display = actor.display_name or actor.name
            if actor.role == Role.CUSTODIAN:
                key = self.system.custodian(actor.custodian or "")
            elif actor.role == Role.ADMIN:
                self.signers[actor.name] = self.admin
                continue
            elif actor.role == Role.DATA_OWNER:
                vault = self.system.create_vault(actor.seed or "", policy=self.substitute(actor.policy))
                key = vault.keypair
                self._admin_call(
                    "gateway.register_principal",
                    {"public_key": key.public_key_hex, "role": actor.role.value, "display_name": display},
                )
            else:
                key = KeyPair.from_seed(actor.seed or "")
                self._admin_call(
                    "gateway.register_principal",
                    {"public_key": key.public_key_hex, "role": actor.role.value, "display_name": display},
                )
            self.signers[actor.name] = EnvelopeSigner(key)

    # -- time --------------------------------------------------------------------

    def advance_to(self, at: int) -> None:
        every = self.system.settings.chaff_tumble_every_ms
        while every > 0 and self._next_chaff_tumble <= at:
            self.system.advance_to(self._next_chaff_tumble)
            self.system.chaff_tumble_all(self.system.settings.k_default)
            self._next_chaff_tumble += every
        self.system.advance_to(at)

    # -- steps -------------------------------------------------------------------

    def _sim_op(self, step: StepSpec, params: Dict[str, Any]) -> Any:
        if step.op == "sim.settle":
            self.system.settle()
            return {"pending": self.system.consortium.pending()}
        if step.op == "sim.arm_fault":
            boundaries = params.get("boundaries") or []
            self.system.protocol.faults.arm(*boundaries)
            return {"armed": sorted(boundaries)}
        return {"batches": self.system.chaff_tumble_all(int(params.get("k", self.system.settings.k_default)))}

    def run_step(self, index: int, step: StepSpec) -> StepOutcome:
        outcome = StepOutcome(index=index, step=step)
        self.advance_to(step.at)
        label = step.id or f"#{index}"
        try:
            params = self.substitute(step.params)
        except ScenarioError as exc:
            self.failures.append(f"step {label} ({step.op}): {exc.message}")
            outcome.errors.append(exc.code)
            return outcome

        for _ in range(step.repeat):
            try:
                if step.actor == "sim":
                    result = self._sim_op(step, params)
                else:
                    result = self.gateway.handle(self.signers[step.actor].sign(step.op, params))
            except OwnershipError as exc:
                outcome.results.append(None)
                outcome.errors.append(exc.code)
                if step.expect_error is None:
                    self.failures.append(f"step {label} ({step.op}) failed: {exc.code}: {exc.message}")
                elif exc.code != step.expect_error:
                    self.failures.append(
                        f"step {label} ({step.op}) failed with {exc.code}, expected {step.expect_error}"
                    )
                continue
            outcome.results.append(result)
            outcome.errors.append(None)
            if step.expect_error is not None:
                self.failures.append(f"step {label} ({step.op}) succeeded, expected {step.expect_error}")

        self.system.trace.record(
            "sim",
            "step",
            {
                "index": index,
                "id": step.id,
                "actor": step.actor,
                "op": step.op,
                "repeat": step.repeat,
                "errors": sorted({e for e in outcome.errors if e is not None}),
            },
        )
        if step.save and outcome.results and outcome.errors[-1] is None:
            for name, path in step.save.items():
                value = extract(outcome.results[-1], path)
                if value is _MISSING:
                    self.failures.append(f"step {label}: nothing at '{path}' to save as '{name}'")
                else:
                    self.saved[name] = value
        return outcome

    # -- assertions --------------------------------------------------------------

    def _check_assertion(self, assertion: AssertionSpec, audit: AuditReport) -> AssertionResult:
        def result(passed: bool, detail: str = "") -> AssertionResult:
            return AssertionResult(name=assertion.name, passed=passed, detail=detail)

        if assertion.audit is not None:
            if assertion.audit == "all":
                return result(audit.passed, ", ".join(audit.failed()))
            if assertion.audit not in audit.checks:
                return result(False, f"no audit check named '{assertion.audit}'")
            check = audit.check(assertion.audit)
            return result(check.passed, check.detail)

        outcome = next((o for o in self.outcomes if o.step.id == assertion.step), None)
        if outcome is None or not outcome.errors:
            return result(False, f"step '{assertion.step}' never ran")
        if assertion.error is not None:
            wrong = [e for e in outcome.errors if e != assertion.error]
            return result(not wrong, f"got {sorted({str(e) for e in wrong})}" if wrong else "")

        try:
            expected_equals = self.substitute(assertion.equals)
            expected_contains = self.substitute(assertion.contains)
        except ScenarioError as exc:
            return result(False, exc.message)
        for attempt, (value, error) in enumerate(zip(outcome.results, outcome.errors)):
            if error is not None:
                return result(False, f"repetition {attempt} failed with {error}")
            found = extract(value, assertion.path)
            if found is _MISSING:
                return result(False, f"repetition {attempt}: nothing at '{assertion.path}'")
            if assertion.has_equals and found != expected_equals:
                return result(False, f"repetition {attempt}: {found!r} != {expected_equals!r}")
            if assertion.has_contains:
                try:
                    present = expected_contains in found
                except TypeError:
                    present = False
                if not present:
                    return result(False, f"repetition {attempt}: {expected_contains!r} not in {found!r}")
            if assertion.length is not None:
                if not isinstance(found, (list, dict, str)) or len(found) != assertion.length:
                    return result(False, f"repetition {attempt}: length is not {assertion.length}")
        return result(True, f"{len(outcome.results)} repetitions")

    # -- run ---------------------------------------------------------------------

    def _attacks(self) -> List[AttackReport]:
        config = self.scenario.adversary
        name = config.store or self.system.settings.custodians[0].name
        store = self.system.store(name)
        receipts = self.system.trace.select("identity", "tumble_receipt")
        if not any(e.data["store"] == store.endpoint_url for e in receipts):
            return []
        return evaluate_attacks(
            self.system.trace,
            store.endpoint_url,
            config.strategies,
            store=store,
            include_directory=config.include_directory,
            seed=self.scenario.seed,
        )

    def run(self) -> ScenarioRun:
        log = logger.bind(scenario=self.scenario.name, seed=self.scenario.seed)
        log.info("sim.scenario_started", steps=len(self.scenario.steps))
        self.setup_actors()
        for index, step in enumerate(self.scenario.steps):
            self.outcomes.append(self.run_step(index, step))

        self.system.settle()
        snapshots = self.system.consortium.snapshots()
        self.system.trace.record(
            "sim",
            "final",
            {
                "ledger_digest": self.system.ledger.state_digest(),
                "record_digests": {node: sha256_hex(raw) for node, raw in snapshots.items()},
            },
        )
        audit = audit_trace(self.system.trace, snapshots=snapshots)
        assertions = [self._check_assertion(a, audit) for a in self.scenario.assertions]
        report = ScenarioReport(
            name=self.scenario.name,
            seed=self.scenario.seed,
            passed=not self.failures and all(a.passed for a in assertions),
            steps=len(self.outcomes),
            failures=self.failures,
            assertions=assertions,
            audit=audit,
            attacks=self._attacks(),
            network=self.network.stats(),
        )
        log.info(
            "sim.scenario_finished",
            passed=report.passed,
            failures=len(report.failures),
            events=len(self.system.trace),
        )
        return ScenarioRun(
            scenario=self.scenario,
            system=self.system,
            gateway=self.gateway,
            outcomes=self.outcomes,
            report=report,
        )


def run_scenario(scenario: Scenario | str | Path, config_path: Optional[str | Path] = None) -> ScenarioRun:
    """Run a scenario (object or file path) against a fresh system."""
    if not isinstance(scenario, Scenario):
        scenario = load_scenario(scenario)
    return ScenarioRunner(scenario, config_path).run()
