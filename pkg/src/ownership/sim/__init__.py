"""
Deterministic multi-actor simulator, trace auditor and linkage-attack evaluator.
"""

from .adversary import (
    STRATEGIES,
    AdversaryView,
    AttackReport,
    ExperimentResult,
    build_adversary_view,
    evaluate_attacks,
    linkage_attack,
    run_tumble_experiment,
    view_leaks,
)
from .audit import CHECKS, AuditReport, CheckResult, audit_trace
from .network import SeededNetwork
from .runner import ScenarioReport, ScenarioRun, ScenarioRunner, run_scenario
from .scenario import Scenario, bundled_scenario_path, load_scenario, parse_scenario

__all__ = [
    "STRATEGIES",
    "AdversaryView",
    "AttackReport",
    "ExperimentResult",
    "build_adversary_view",
    "evaluate_attacks",
    "linkage_attack",
    "run_tumble_experiment",
    "view_leaks",
    "CHECKS",
    "AuditReport",
    "CheckResult",
    "audit_trace",
    "SeededNetwork",
    "ScenarioReport",
    "ScenarioRun",
    "ScenarioRunner",
    "run_scenario",
    "Scenario",
    "bundled_scenario_path",
    "load_scenario",
    "parse_scenario",
]
