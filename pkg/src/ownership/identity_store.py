"""
Per-custodian identifying store.

Entries are keyed by a hash over (payload, created_at, nonce). Every real
creation is accompanied by a random number of chaff entries, and every tumble
re-keys the real entry together with k chaff entries in one atomic batch whose
application order is shuffled. Only the public mutation feed
(``removed_id``/``added_id``/``batch_id``) is visible to outsiders.
"""

import copy
import hashlib
import threading
from typing import Any, Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict

from . import predicates
from .canonical import canonical_json, derive_seed
from .chaff import ChaffGenerator, DistributionalChaffGenerator
from .clock import SimulatedClock
from .errors import ForbiddenError, NotFoundError, RejectedError, ValidationFailure
from .ledger import Ledger, LinkContract
from .metrics import TUMBLE_BATCHES
from .models import TumbleReceipt
from .trace import EventTrace

logger = structlog.get_logger(__name__)

NONCE_BYTES = 16


def compute_entry_id(payload: Mapping[str, str], created_at: int, nonce: bytes) -> str:
    """SHA-256 over canonical(payload) || created_at (8 bytes, big-endian) || nonce."""
    if not payload:
        raise ValidationFailure("identity payload must not be empty")
    if len(nonce) != NONCE_BYTES:
        raise ValidationFailure(f"nonce must be {NONCE_BYTES} bytes")
    if created_at < 0:
        raise ValidationFailure("created_at must be non-negative")
    h = hashlib.sha256()
    h.update(canonical_json(dict(payload)))
    h.update(created_at.to_bytes(8, "big"))
    h.update(nonce)
    return h.hexdigest()


class IdentityEntry(BaseModel):
    """A stored entry. ``nonce`` and ``is_chaff`` never leave the store."""

    model_config = ConfigDict(frozen=True)

    entry_id: str
    payload: Dict[str, str]
    created_at: int
    nonce: str
    is_chaff: bool = False

    def public_view(self) -> Dict[str, Any]:
        return {"entry_id": self.entry_id, "payload": dict(self.payload), "created_at": self.created_at}


class FeedEvent(BaseModel):
    """One public re-key event; creations have no removed id, deletions no added id."""

    model_config = ConfigDict(frozen=True)

    removed_id: Optional[str] = None
    added_id: Optional[str] = None
    batch_id: int


class StoreCheckpoint(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    entries: Dict[str, IdentityEntry]
    chaff_ids: Set[str]
    lineage: Dict[str, List[str]]
    feed_length: int
    next_batch: int
    chaff_generator: ChaffGenerator


class IdentityStore:
    """CRUD identifying database hosted by one custodian."""

    def __init__(
        self,
        custodian: str,
        endpoint_url: str,
        ledger: Ledger,
        *,
        fields: Sequence[str],
        clock: Optional[SimulatedClock] = None,
        chaff_ratio: float = 0.5,
        chaff_generator: Optional[ChaffGenerator] = None,
        seed: int = 0,
        shuffle_batches: bool = True,
        trace: Optional[EventTrace] = None,
    ):
        if not 0.0 <= chaff_ratio < 1.0:
            raise ValidationFailure("chaff_ratio must be in [0, 1)")
        self.custodian = custodian
        self.endpoint_url = endpoint_url
        self.ledger = ledger
        self.fields = tuple(fields)
        self.clock = clock or SimulatedClock()
        self.chaff_ratio = chaff_ratio
        self.chaff_generator = chaff_generator or DistributionalChaffGenerator()
        self.shuffle_batches = shuffle_batches
        self.trace = trace if trace is not None else ledger.trace
        self._rng = np.random.default_rng(derive_seed(seed, f"identity-store:{endpoint_url}"))
        self._entries: Dict[str, IdentityEntry] = {}
        self._chaff_ids: Set[str] = set()
        self._lineage: Dict[str, List[str]] = {}
        self._feed: List[FeedEvent] = []
        self._next_batch = 1
        self._lock = threading.RLock()

    # -- helpers -------------------------------------------------------------

    def _check_schema(self, payload: Mapping[str, Any]) -> Dict[str, str]:
        if not isinstance(payload, Mapping) or not payload:
            raise ValidationFailure("identity payload must be a non-empty mapping")
        unknown = sorted(set(payload) - set(self.fields))
        if unknown:
            raise ValidationFailure(f"fields outside the identifying schema: {', '.join(unknown)}", fields=unknown)
        for key, value in payload.items():
            if not isinstance(value, str):
                raise ValidationFailure(f"field '{key}' must be a string", field=key)
        return dict(payload)

    def _fresh_entry(self, payload: Dict[str, str], is_chaff: bool) -> IdentityEntry:
        created_at = self.clock.now()
        while True:
            nonce = self._rng.bytes(NONCE_BYTES)
            entry_id = compute_entry_id(payload, created_at, nonce)
            if entry_id not in self._entries:
                break
        return IdentityEntry(
            entry_id=entry_id,
            payload=payload,
            created_at=created_at,
            nonce=nonce.hex(),
            is_chaff=is_chaff,
        )

    def _require_custodian(self, requester: str) -> None:
        if requester != self.custodian:
            raise ForbiddenError("only the hosting custodian may perform this operation")

    def _get(self, entry_id: str) -> IdentityEntry:
        entry = self._entries.get(entry_id)
        if entry is None:
            raise NotFoundError("identity entry not found", entry_id=entry_id)
        return entry

    def _linked_contracts(self, entry_id: str) -> List[LinkContract]:
        """Contracts pointing at this entry now or at any id it was re-keyed from."""
        seen: Dict[str, LinkContract] = {}
        for candidate in self._lineage.get(entry_id, []) + [entry_id]:
            for contract in self.ledger.contracts_referencing(candidate):
                seen[contract.address] = contract
        return [seen[a] for a in sorted(seen)]

    def _verified_owner_contract(self, requester: str, entry_id: str) -> Optional[LinkContract]:
        if self.ledger.is_custodian(requester):
            return None
        for contract in self._linked_contracts(entry_id):
            if contract.owner == requester:
                return contract
        return None

    def _authorize_rekey(self, requester: str, entry_id: str) -> None:
        if self._verified_owner_contract(requester, entry_id) is not None:
            return
        if requester == self.custodian:
            if any(not self.ledger.is_custodian(c.owner) for c in self._linked_contracts(entry_id)):
                raise ForbiddenError("entry is claimed by its data owner")
            return
        raise ForbiddenError("requester is neither the custodian nor the verified owner")

    def _replace(self, old: IdentityEntry, new: IdentityEntry) -> None:
        del self._entries[old.entry_id]
        self._entries[new.entry_id] = new
        if old.is_chaff:
            self._chaff_ids.discard(old.entry_id)
            self._chaff_ids.add(new.entry_id)
        else:
            self._lineage[new.entry_id] = self._lineage.pop(old.entry_id, []) + [old.entry_id]

    def _rekey_batch(self, entry_ids: List[str]) -> Tuple[int, List[Tuple[str, str]]]:
        batch_id = self._next_batch
        self._next_batch += 1
        pairs: List[Tuple[str, str]] = []
        for old_id in entry_ids:
            old = self._entries[old_id]
            new = self._fresh_entry(dict(old.payload), old.is_chaff)
            self._replace(old, new)
            pairs.append((old_id, new.entry_id))
            self._feed.append(FeedEvent(removed_id=old_id, added_id=new.entry_id, batch_id=batch_id))
        TUMBLE_BATCHES.labels(store=self.endpoint_url).inc()
        self.trace.record(
            "identity",
            "rekey_batch",
            {
                "store": self.endpoint_url,
                "batch_id": batch_id,
                "updates": [{"removed_id": o, "added_id": n} for o, n in pairs],
            },
        )
        return batch_id, pairs

    def _sample_chaff(self, k: int, exclude: str = "") -> List[str]:
        available = sorted(self._chaff_ids - {exclude})
        if len(available) < k:
            raise RejectedError(
                f"not enough chaff entries: need {k}, have {len(available)}",
                shortfall=k - len(available),
            )
        if k == 0:
            return []
        picks = self._rng.choice(len(available), size=k, replace=False)
        return [available[int(i)] for i in picks]

    # -- operations ------------------------------------------------------------

    def create_entry(
        self,
        custodian: str,
        payload: Mapping[str, Any],
        chaff_ratio: Optional[float] = None,
    ) -> Tuple[str, List[str]]:
        """Store a real entry plus Poisson(r / (1 - r)) chaff entries."""
        self._require_custodian(custodian)
        clean = self._check_schema(payload)
        ratio = self.chaff_ratio if chaff_ratio is None else chaff_ratio
        if not 0.0 <= ratio < 1.0:
            raise ValidationFailure("chaff_ratio must be in [0, 1)")
        with self._lock:
            self.chaff_generator.observe(clean)
            real = self._fresh_entry(clean, is_chaff=False)
            self._entries[real.entry_id] = real
            n_chaff = int(self._rng.poisson(ratio / (1.0 - ratio))) if ratio > 0 else 0
            chaff = []
            for _ in range(n_chaff):
                entry = self._fresh_entry(self.chaff_generator.generate(self._rng), is_chaff=True)
                self._entries[entry.entry_id] = entry
                self._chaff_ids.add(entry.entry_id)
                chaff.append(entry.entry_id)

            batch_id = self._next_batch
            self._next_batch += 1
            created = [real.entry_id] + chaff
            order = [created[int(i)] for i in self._rng.permutation(len(created))]
            for added in order:
                self._feed.append(FeedEvent(added_id=added, batch_id=batch_id))
        self.trace.record(
            "identity",
            "created",
            {"store": self.endpoint_url, "batch_id": batch_id, "added_ids": order},
            actor=custodian,
        )
        self.trace.record(
            "identity",
            "create_receipt",
            {"store": self.endpoint_url, "batch_id": batch_id, "entry_id": real.entry_id, "chaff_ids": chaff},
            actor=custodian,
            private=True,
        )
        logger.debug("identity.created", store=self.endpoint_url, chaff=len(chaff))
        return real.entry_id, chaff

    def read_entry(self, entry_id: str) -> Dict[str, str]:
        """Payload of a real or chaff entry; unknown ids are not-found."""
        with self._lock:
            return dict(self._get(entry_id).payload)

    def get_entry(self, entry_id: str) -> Dict[str, Any]:
        with self._lock:
            return self._get(entry_id).public_view()

    def tumble(self, requester: str, entry_id: str, k: int) -> TumbleReceipt:
        """Re-key ``entry_id`` together with k chaff entries in one shuffled batch."""
        if k < 0:
            raise ValidationFailure("k must be non-negative")
        with self._lock:
            self._get(entry_id)
            self._authorize_rekey(requester, entry_id)
            decoys = self._sample_chaff(k, exclude=entry_id)
            updates = [entry_id] + decoys
            if self.shuffle_batches:
                updates = [updates[int(i)] for i in self._rng.permutation(len(updates))]
            batch_id, pairs = self._rekey_batch(updates)

        mapping = dict(pairs)
        receipt = TumbleReceipt(
            batch_id=batch_id,
            old_id=entry_id,
            new_id=mapping[entry_id],
            decoy_updates=[(old, mapping[old]) for old in decoys],
            batch_order=[new for _, new in pairs],
        )
        self.trace.record(
            "identity",
            "tumble_receipt",
            {"store": self.endpoint_url, "receipt": receipt.model_dump(mode="json")},
            actor=requester,
            private=True,
        )
        logger.info("identity.tumbled", store=self.endpoint_url, batch_id=batch_id, k=k)
        return receipt

    def tumble_chaff(self, requester: str, k: int) -> int:
        """Re-key k chaff entries with no real entry in the batch."""
        self._require_custodian(requester)
        if k <= 0:
            raise ValidationFailure("k must be positive")
        with self._lock:
            picks = self._sample_chaff(k)
            batch_id, _ = self._rekey_batch(picks)
        self.trace.record(
            "identity",
            "chaff_tumble",
            {"store": self.endpoint_url, "batch_id": batch_id},
            actor=requester,
            private=True,
        )
        return batch_id

    def update_payload(self, custodian: str, entry_id: str, new_payload: Mapping[str, Any]) -> str:
        """Replace the payload of an unclaimed entry; the entry is re-keyed."""
        self._require_custodian(custodian)
        clean = self._check_schema(new_payload)
        with self._lock:
            old = self._get(entry_id)
            if any(not self.ledger.is_custodian(c.owner) for c in self._linked_contracts(entry_id)):
                raise RejectedError("entry is claimed; the owner's consent is required", entry_id=entry_id)
            self.chaff_generator.observe(clean)
            new = self._fresh_entry(clean, old.is_chaff)
            self._replace(old, new)
            batch_id = self._next_batch
            self._next_batch += 1
            self._feed.append(FeedEvent(removed_id=entry_id, added_id=new.entry_id, batch_id=batch_id))
        self.trace.record(
            "identity",
            "updated",
            {"store": self.endpoint_url, "batch_id": batch_id, "removed_id": entry_id, "added_id": new.entry_id},
            actor=custodian,
        )
        return new.entry_id

    def delete_entry(self, requester: str, entry_id: str) -> Dict[str, str]:
        """Permanently remove an entry on behalf of its verified owner."""
        with self._lock:
            entry = self._get(entry_id)
            if self._verified_owner_contract(requester, entry_id) is None:
                raise ForbiddenError("only the verified data owner may delete an entry")
            del self._entries[entry_id]
            self._lineage.pop(entry_id, None)
            batch_id = self._next_batch
            self._next_batch += 1
            self._feed.append(FeedEvent(removed_id=entry_id, batch_id=batch_id))
        self.trace.record(
            "identity",
            "deleted",
            {"store": self.endpoint_url, "batch_id": batch_id, "removed_id": entry_id},
            actor=requester,
        )
        return dict(entry.payload)

    def search_payload(self, caller: str, criteria: Mapping[str, Any]) -> List[str]:
        """Ids of real and chaff entries matching ``criteria``, sorted."""
        doc = predicates.from_criteria(criteria)
        predicates.validate(doc, allowed_fields=self.fields)
        with self._lock:
            hits = sorted(
                entry_id
                for entry_id, entry in self._entries.items()
                if predicates.evaluate(doc, entry.payload)
            )
        logger.debug("identity.search", store=self.endpoint_url, caller=caller[:16], hits=len(hits))
        return hits

    # -- saga support ------------------------------------------------------------

    def checkpoint(self) -> StoreCheckpoint:
        with self._lock:
            return StoreCheckpoint(
                entries=dict(self._entries),
                chaff_ids=set(self._chaff_ids),
                lineage=copy.deepcopy(self._lineage),
                feed_length=len(self._feed),
                next_batch=self._next_batch,
                chaff_generator=copy.deepcopy(self.chaff_generator),
            )

    def restore(self, checkpoint: StoreCheckpoint) -> None:
        with self._lock:
            self._entries = dict(checkpoint.entries)
            self._chaff_ids = set(checkpoint.chaff_ids)
            self._lineage = copy.deepcopy(checkpoint.lineage)
            del self._feed[checkpoint.feed_length:]
            self._next_batch = checkpoint.next_batch
            self.chaff_generator = copy.deepcopy(checkpoint.chaff_generator)
        self.trace.record("identity", "restored", {"store": self.endpoint_url}, private=True)

    # -- exports -------------------------------------------------------------------

    def export_snapshot(self) -> bytes:
        """Canonical JSON map of entry id to {payload, created_at}."""
        with self._lock:
            return canonical_json(
                {
                    entry_id: {"payload": entry.payload, "created_at": entry.created_at}
                    for entry_id, entry in self._entries.items()
                }
            )

    def mutation_feed(self, since_batch: int = 0) -> List[FeedEvent]:
        with self._lock:
            return [e for e in self._feed if e.batch_id > since_batch]

    def entry_ids(self) -> List[str]:
        with self._lock:
            return sorted(self._entries)

    def __contains__(self, entry_id: object) -> bool:
        return entry_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def chaff_count(self) -> int:
        """Number of chaff entries. Custodian-private."""
        return len(self._chaff_ids)
