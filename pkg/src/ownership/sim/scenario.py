"""
Scenario files.

A scenario is a JSON document: a seed, settings overrides, a network model,
the actors, a time-ordered list of steps and the assertions checked at the
end of the run. Step parameters may reference earlier results: ``"$name"`` is
replaced by a value saved with ``save`` and ``"@actor"`` by an actor's
address.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ..errors import ScenarioError
from ..models import Role

SIM_OPERATIONS = frozenset({"sim.settle", "sim.arm_fault", "sim.chaff_tumble"})


class DelayModel(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["constant", "uniform", "exponential"] = "constant"
    ms: int = Field(0, ge=0)
    low: int = Field(0, ge=0)
    high: int = Field(0, ge=0)
    mean: float = Field(0.0, ge=0.0)

    @model_validator(mode="after")
    def _check_bounds(self) -> "DelayModel":
        if self.kind == "uniform" and self.high < self.low:
            raise ValueError("uniform delay needs high >= low")
        return self


class NetworkModel(BaseModel):
    """Replication network between record-store nodes."""

    model_config = ConfigDict(extra="forbid")

    delay: DelayModel = Field(default_factory=DelayModel)
    reorder_probability: float = Field(0.0, ge=0.0, le=1.0)
    duplicate_probability: float = Field(0.0, ge=0.0, lt=1.0)
    loss_probability: float = Field(0.0, ge=0.0, lt=1.0)
    retransmit_ms: int = Field(50, ge=1)


class ActorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    role: Role
    seed: Optional[str] = None
    custodian: Optional[str] = None
    policy: Any = None
    display_name: str = ""

    @model_validator(mode="after")
    def _check_keys(self) -> "ActorSpec":
        if self.role == Role.CUSTODIAN:
            if not self.custodian:
                raise ValueError(f"custodian actor '{self.name}' must name a configured custodian")
        elif self.role != Role.ADMIN and not self.seed:
            raise ValueError(f"actor '{self.name}' needs a key seed")
        return self


class StepSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    at: int = Field(0, ge=0)
    actor: str = "sim"
    op: str
    params: Dict[str, Any] = Field(default_factory=dict)
    id: Optional[str] = None
    repeat: int = Field(1, ge=1)
    save: Dict[str, str] = Field(default_factory=dict)
    expect_error: Optional[str] = None

    @field_validator("op")
    @classmethod
    def _dotted(cls, v: str) -> str:
        if v.count(".") != 1:
            raise ValueError("operation must be written module.op")
        return v


class AssertionSpec(BaseModel):
    """Named expectation evaluated after the run.

    ``step`` + ``path`` + ``equals`` compares a result field for every
    repetition of the step; ``error`` expects the step to have failed with that
    code; ``audit`` requires an audit check (or ``"all"``) to pass.
    """

    model_config = ConfigDict(extra="forbid")

    name: str
    step: Optional[str] = None
    path: str = ""
    equals: Any = None
    contains: Any = None
    length: Optional[int] = Field(None, ge=0)
    error: Optional[str] = None
    audit: Optional[str] = None

    @model_validator(mode="after")
    def _check_target(self) -> "AssertionSpec":
        if self.audit is None and self.step is None:
            raise ValueError(f"assertion '{self.name}' needs a step or an audit check")
        return self

    @property
    def has_equals(self) -> bool:
        return "equals" in self.model_fields_set

    @property
    def has_contains(self) -> bool:
        return "contains" in self.model_fields_set


class AdversaryConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    include_directory: bool = True
    strategies: List[str] = Field(default_factory=lambda: ["uniform", "timing-order", "payload-frequency"])
    store: Optional[str] = None


class Scenario(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    description: str = ""
    seed: int = Field(0, ge=0, lt=2**64)
    settings: Dict[str, Any] = Field(default_factory=dict)
    network: NetworkModel = Field(default_factory=NetworkModel)
    adversary: AdversaryConfig = Field(default_factory=AdversaryConfig)
    actors: List[ActorSpec] = Field(default_factory=list)
    steps: List[StepSpec] = Field(default_factory=list)
    assertions: List[AssertionSpec] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_references(self) -> "Scenario":
        names = [a.name for a in self.actors]
        if len(set(names)) != len(names):
            raise ValueError("actor names must be unique")
        if "sim" in names:
            raise ValueError("'sim' is reserved for simulator steps")
        ids = [s.id for s in self.steps if s.id is not None]
        if len(set(ids)) != len(ids):
            raise ValueError("step ids must be unique")
        last = 0
        for index, step in enumerate(self.steps):
            if step.at < last:
                raise ValueError(f"step {index} goes back in time ({step.at} < {last})")
            last = step.at
            if step.actor == "sim":
                if step.op not in SIM_OPERATIONS:
                    raise ValueError(f"step {index}: unknown simulator operation '{step.op}'")
            elif step.actor not in names:
                raise ValueError(f"step {index}: unknown actor '{step.actor}'")
        for assertion in self.assertions:
            if assertion.step is not None and assertion.step not in ids:
                raise ValueError(f"assertion '{assertion.name}' refers to unknown step '{assertion.step}'")
        return self

    def actor(self, name: str) -> ActorSpec:
        for actor in self.actors:
            if actor.name == name:
                return actor
        raise ScenarioError(f"unknown actor '{name}'")


def _error_location(exc: ValidationError) -> str:
    first = exc.errors(include_url=False)[0]
    loc = ".".join(str(p) for p in first["loc"])
    return f"{loc}: {first['msg']}" if loc else first["msg"]


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """Parse and validate a scenario document."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{source}: line {exc.lineno}: {exc.msg}", line=exc.lineno)
    if not isinstance(raw, dict):
        raise ScenarioError(f"{source}: line 1: scenario must be a JSON object", line=1)
    try:
        return Scenario.model_validate(raw)
    except ValidationError as exc:
        raise ScenarioError(f"{source}: {_error_location(exc)}")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror}")
    return parse_scenario(text, source=str(path))


def bundled_scenario_path(name: str) -> Path:
    """Path of a scenario shipped with the package (``academic``, ``medical``)."""
    path = Path(__file__).resolve().parent.parent / "scenarios" / f"{name}.json"
    if not path.exists():
        raise ScenarioError(f"no bundled scenario named '{name}'")
    return path
