"""
Totally ordered event trace of a run.

Every plane (ledger, identity stores, record store, vaults, protocol, gateway)
appends to the same trace. Events marked ``private`` hold material that never
leaves its owner (tumble receipts, chaff markers, consent payloads) and are
excluded from adversary views.
"""

import threading
from typing import Any, Callable, Dict, Iterable, Iterator, List, Optional

from pydantic import BaseModel, Field

from .canonical import canonical_json, from_ndjson, to_ndjson
from .clock import SimulatedClock


class TraceEvent(BaseModel):
    seq: int
    time: int
    plane: str
    kind: str
    actor: Optional[str] = None
    private: bool = False
    data: Dict[str, Any] = Field(default_factory=dict)

    @property
    def name(self) -> str:
        return f"{self.plane}.{self.kind}"


class EventTrace:
    """Append-only event log with a single serialization point."""

    def __init__(self, clock: Optional[SimulatedClock] = None):
        self.clock = clock or SimulatedClock()
        self._events: List[TraceEvent] = []
        self._lock = threading.Lock()
        self._listeners: List[Callable[[TraceEvent], None]] = []

    def record(
        self,
        plane: str,
        kind: str,
        data: Optional[Dict[str, Any]] = None,
        actor: Optional[str] = None,
        private: bool = False,
    ) -> TraceEvent:
        with self._lock:
            event = TraceEvent(
                seq=len(self._events) + 1,
                time=self.clock.now(),
                plane=plane,
                kind=kind,
                actor=actor,
                private=private,
                data=dict(data or {}),
            )
            self._events.append(event)
        for listener in self._listeners:
            listener(event)
        return event

    def subscribe(self, listener: Callable[[TraceEvent], None]) -> None:
        self._listeners.append(listener)

    @property
    def events(self) -> List[TraceEvent]:
        with self._lock:
            return list(self._events)

    def __len__(self) -> int:
        return len(self._events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def select(self, plane: Optional[str] = None, kind: Optional[str] = None) -> List[TraceEvent]:
        return [
            e
            for e in self.events
            if (plane is None or e.plane == plane) and (kind is None or e.kind == kind)
        ]

    def public_events(self) -> List[TraceEvent]:
        return [e for e in self.events if not e.private]

    def to_ndjson(self) -> bytes:
        return to_ndjson(e.model_dump(mode="json") for e in self.events)

    def fingerprint(self) -> bytes:
        """Canonical bytes of the whole trace, for determinism checks."""
        return canonical_json([e.model_dump(mode="json") for e in self.events])

    @classmethod
    def from_events(cls, events: Iterable[TraceEvent | Dict[str, Any]]) -> "EventTrace":
        trace = cls()
        for raw in events:
            event = raw if isinstance(raw, TraceEvent) else TraceEvent.model_validate(raw)
            trace._events.append(event)
        return trace

    @classmethod
    def from_ndjson(cls, data: bytes | str) -> "EventTrace":
        return cls.from_events(from_ndjson(data))
