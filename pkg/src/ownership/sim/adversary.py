"""
Linkage-attack evaluator.

The adversary is a passive observer: it sees the public mutation feed of one
identifying store, the ledger transaction log, optionally the history of ids
published in the directory, and can read live store entries after the fact.
It never sees tumble receipts, chaff markers or nonces. For every tumble batch
it guesses which added id belongs to the real user; the guess is scored
against the private receipt in the trace.
"""

import math
from collections import Counter
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field

from ..canonical import canonical_json, derive_seed
from ..config import load_settings
from ..errors import RejectedError, ValidationFailure
from ..identity_store import IdentityStore
from ..system import System
from ..trace import EventTrace

logger = structlog.get_logger(__name__)

STRATEGIES = ("uniform", "timing-order", "payload-frequency", "directory-history")
EXCLUDED_FIELDS = frozenset({"is_chaff", "nonce", "receipt", "old_id", "new_id", "decoy_updates"})


class ObservedUpdate(BaseModel):
    model_config = ConfigDict(frozen=True)

    removed_id: str
    added_id: str


class ObservedBatch(BaseModel):
    model_config = ConfigDict(frozen=True)

    batch_id: int
    seq: int
    updates: List[ObservedUpdate]


class AdversaryView(BaseModel):
    """Everything a passive observer of one store and the ledger can see."""

    endpoint_url: str
    include_directory: bool = True
    batches: List[ObservedBatch] = Field(default_factory=list)
    ledger: List[Dict[str, Any]] = Field(default_factory=list)
    published_ids: List[str] = Field(default_factory=list)
    entries: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    successors: Dict[str, str] = Field(default_factory=dict)

    def terminal_id(self, entry_id: str) -> str:
        """Follow the public feed forward to the id the entry lives under now."""
        seen = set()
        while entry_id in self.successors and entry_id not in seen:
            seen.add(entry_id)
            entry_id = self.successors[entry_id]
        return entry_id

    def payload_of(self, entry_id: str) -> Optional[Dict[str, Any]]:
        entry = self.entries.get(self.terminal_id(entry_id))
        return None if entry is None else entry["payload"]


class AttackReport(BaseModel):
    strategy: str
    k: int
    trials: int
    correct: int
    accuracy: float
    ci95: List[float]
    include_directory: bool = True


def build_adversary_view(
    trace: EventTrace,
    endpoint_url: str,
    store: Optional[IdentityStore] = None,
    include_directory: bool = True,
) -> AdversaryView:
    """Assemble the adversary's view from public trace events (and public store reads)."""
    batches: List[ObservedBatch] = []
    ledger: List[Dict[str, Any]] = []
    published: List[str] = []
    successors: Dict[str, str] = {}
    for event in trace.public_events():
        if event.plane == "identity" and event.kind == "rekey_batch" and event.data["store"] == endpoint_url:
            updates = [ObservedUpdate(**u) for u in event.data["updates"]]
            batches.append(ObservedBatch(batch_id=event.data["batch_id"], seq=event.seq, updates=updates))
            for update in updates:
                successors[update.removed_id] = update.added_id
        elif event.plane == "ledger" and event.kind == "tx":
            tx = event.data["tx"]
            ledger.append(tx)
            if include_directory and tx["kind"] in ("deploy", "directory_put"):
                published.append(tx["body"]["entry_id"])
    entries: Dict[str, Dict[str, Any]] = {}
    if store is not None:
        entries = {entry_id: store.get_entry(entry_id) for entry_id in store.entry_ids()}
    return AdversaryView(
        endpoint_url=endpoint_url,
        include_directory=include_directory,
        batches=batches,
        ledger=ledger,
        published_ids=sorted(set(published)),
        entries=entries,
        successors=successors,
    )


def view_leaks(view: AdversaryView) -> List[str]:
    """Excluded field names found anywhere in the serialized view."""
    found = set()

    def walk(node: Any) -> None:
        if isinstance(node, dict):
            for key, value in node.items():
                if key in EXCLUDED_FIELDS:
                    found.add(key)
                walk(value)
        elif isinstance(node, list):
            for item in node:
                walk(item)

    walk(view.model_dump(mode="json"))
    return sorted(found)


# -- strategies ----------------------------------------------------------------------

Guess = Callable[[ObservedBatch, AdversaryView, np.random.Generator], str]


def _uniform(batch: ObservedBatch, view: AdversaryView, rng: np.random.Generator) -> str:
    return batch.updates[int(rng.integers(0, len(batch.updates)))].added_id


def _timing_order(batch: ObservedBatch, view: AdversaryView, rng: np.random.Generator) -> str:
    return batch.updates[0].added_id


def _payload_frequency(batch: ObservedBatch, view: AdversaryView, rng: np.random.Generator) -> str:
    counts = Counter(canonical_json(e["payload"]) for e in view.entries.values())

    def rarity(update: ObservedUpdate) -> int:
        payload = view.payload_of(update.added_id)
        return counts[canonical_json(payload)] if payload is not None else 0

    scores = [rarity(u) for u in batch.updates]
    live = [s for s in scores if s > 0]
    target = min(live) if live else 0
    rarest = [u for u, s in zip(batch.updates, scores) if s == target]
    return rarest[int(rng.integers(0, len(rarest)))].added_id


def _directory_history(batch: ObservedBatch, view: AdversaryView, rng: np.random.Generator) -> str:
    published = set(view.published_ids)
    hits = [u for u in batch.updates if u.removed_id in published]
    pool = hits or batch.updates
    return pool[int(rng.integers(0, len(pool)))].added_id


_STRATEGIES: Dict[str, Guess] = {
    "uniform": _uniform,
    "timing-order": _timing_order,
    "payload-frequency": _payload_frequency,
    "directory-history": _directory_history,
}


def _ci95(accuracy: float, trials: int) -> List[float]:
    half = 1.96 * math.sqrt(accuracy * (1.0 - accuracy) / trials)
    return [max(0.0, accuracy - half), min(1.0, accuracy + half)]


def _ground_truth(trace: EventTrace, endpoint_url: str) -> Dict[int, str]:
    truth = {}
    for event in trace.select("identity", "tumble_receipt"):
        if event.data["store"] == endpoint_url:
            receipt = event.data["receipt"]
            truth[receipt["batch_id"]] = receipt["new_id"]
    return truth


def linkage_attack(
    trace: EventTrace,
    strategy: str,
    endpoint_url: Optional[str] = None,
    view: Optional[AdversaryView] = None,
    seed: int = 0,
) -> AttackReport:
    """
    Score one attacker over every real tumble batch in the trace.

    Batches with no real entry (background chaff tumbles) carry no receipt and
    are not scored.
    """
    if strategy not in _STRATEGIES:
        raise ValidationFailure(f"unknown attack strategy '{strategy}'", choices=list(STRATEGIES))
    if view is None:
        if endpoint_url is None:
            stores = sorted({e.data["store"] for e in trace.select("identity", "rekey_batch")})
            if len(stores) != 1:
                raise ValidationFailure("name the store to attack", stores=stores)
            endpoint_url = stores[0]
        view = build_adversary_view(trace, endpoint_url)
    truth = _ground_truth(trace, view.endpoint_url)
    scored = [b for b in view.batches if b.batch_id in truth]
    if not scored:
        raise RejectedError("trace contains no tumble batch for this store", store=view.endpoint_url)

    rng = np.random.default_rng(derive_seed(seed, f"attack:{strategy}"))
    guess = _STRATEGIES[strategy]
    correct = sum(1 for b in scored if guess(b, view, rng) == truth[b.batch_id])
    k = max(len(b.updates) for b in scored) - 1
    accuracy = correct / len(scored)
    report = AttackReport(
        strategy=strategy,
        k=k,
        trials=len(scored),
        correct=correct,
        accuracy=accuracy,
        ci95=_ci95(accuracy, len(scored)),
        include_directory=view.include_directory,
    )
    logger.info("sim.attack", strategy=strategy, k=k, trials=report.trials, accuracy=round(accuracy, 4))
    return report


def evaluate_attacks(
    trace: EventTrace,
    endpoint_url: str,
    strategies: Sequence[str],
    store: Optional[IdentityStore] = None,
    include_directory: bool = True,
    seed: int = 0,
) -> List[AttackReport]:
    """Run several strategies against one view; directory-history is reported with and without directory access."""
    view = build_adversary_view(trace, endpoint_url, store=store, include_directory=include_directory)
    reports = [linkage_attack(trace, s, view=view, seed=seed) for s in strategies]
    if "directory-history" in strategies and include_directory:
        blind = build_adversary_view(trace, endpoint_url, store=store, include_directory=False)
        reports.append(linkage_attack(trace, "directory-history", view=blind, seed=seed))
    return reports


# -- tumble experiment -------------------------------------------------------------------


def _synthetic_person(rng: np.random.Generator, index: int) -> Dict[str, str]:
    first = ["Ada", "Ben", "Chiara", "Dmitri", "Eun", "Farah", "Goran", "Hana", "Ines", "Jonas"]
    last = ["Okafor", "Lindqvist", "Moreau", "Tanaka", "Silva", "Novak", "Haddad", "Kowalski"]
    name = f"{first[int(rng.integers(0, len(first)))]} {last[int(rng.integers(0, len(last)))]}"
    return {
        "name": name,
        "email": f"user{index}@example.org",
        "insurance_number": f"INS{index:07d}",
    }


class ExperimentResult(BaseModel):
    k: int
    batches: int
    chaff_generator: str
    shuffle: bool
    reports: List[AttackReport]

    def report(self, strategy: str, include_directory: bool = True) -> AttackReport:
        for report in self.reports:
            if report.strategy == strategy and report.include_directory == include_directory:
                return report
        raise KeyError(strategy)


def run_tumble_experiment(
    k: int,
    batches: int,
    chaff_generator: str = "distributional",
    shuffle: bool = True,
    seed: int = 0,
    strategies: Sequence[str] = STRATEGIES,
    include_directory: bool = True,
    users: int = 50,
    chaff_ratio: float = 0.5,
) -> ExperimentResult:
    """
    Register a population at one custodian, tumble random users ``batches``
    times with k decoys each, then attack the resulting trace.
    """
    if k < 0 or batches <= 0:
        raise ValidationFailure("k must be non-negative and batches positive")
    if k > 0 and chaff_ratio <= 0:
        raise ValidationFailure("decoys need a positive chaff ratio")
    settings = load_settings(
        seed=seed,
        chaff_ratio=chaff_ratio,
        chaff_generator=chaff_generator,
        shuffle_tumble_batches=shuffle,
        custodians=[{"name": "custodian-a", "seed": "custodian-a", "endpoint_url": "ids://custodian-a"}],
        enable_metrics=False,
    )
    system = System(settings)
    custodian = system.custodian("custodian-a")
    store = system.store("custodian-a")
    rng = np.random.default_rng(derive_seed(seed, "experiment"))
    current: List[str] = []
    while len(current) < users or store.chaff_count < k:
        entry_id, _ = system.protocol.register_user(
            custodian.address, _synthetic_person(rng, len(current))
        )
        current.append(entry_id)
    for _ in range(batches):
        index = int(rng.integers(0, len(current)))
        receipt = store.tumble(custodian.address, current[index], k)
        current[index] = receipt.new_id

    reports = evaluate_attacks(
        system.trace,
        store.endpoint_url,
        strategies,
        store=store,
        include_directory=include_directory,
        seed=seed,
    )
    return ExperimentResult(
        k=k,
        batches=batches,
        chaff_generator=chaff_generator,
        shuffle=shuffle,
        reports=reports,
    )
