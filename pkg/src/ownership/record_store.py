"""
Replicated append-only store of de-identified records.

Each custodian hosts a ``CustodianNode`` whose state is a pure fold of the
ops it has received. Ops are signed by a consortium custodian and replicated
through the ``Consortium`` outbox; delivery may be delayed, duplicated or
reordered by a ``DeliveryPolicy``. Versions are ordered by
``(logical_ts, creator, payload_hash)`` so every delivery order folds to the
same state.
"""

import bisect
import threading
from functools import cached_property
from typing import Any, Dict, Iterable, List, Literal, Mapping, NamedTuple, Optional, Protocol, Sequence, Set, Tuple

import structlog
from pydantic import BaseModel, ConfigDict, Field

from .canonical import canonical_json, canonical_loads, digest, to_ndjson
from .clock import SimulatedClock
from .crypto import KeyPair, verify_signature
from .errors import ForbiddenError, NotFoundError, RejectedError, ValidationFailure
from .ledger import Ledger
from .metrics import RECORD_OPS_DROPPED
from .models import Role
from .queries import QueryResult, QueryWhitelist, evaluate_query
from .trace import EventTrace

logger = structlog.get_logger(__name__)

_CACHED_DIGESTS = ("unsigned_bytes", "op_id", "creation_id", "payload_hash")


class RecordHeader(BaseModel):
    """Immutable part of a record, fixed at creation."""

    model_config = ConfigDict(frozen=True)

    contract_address: str
    links: List[str] = Field(default_factory=list)
    schema_tag: str


class RecordOp(BaseModel):
    """Wire format of a replicated operation."""

    model_config = ConfigDict(frozen=True)

    op_kind: Literal["create", "append"]
    record_id: str
    payload: Dict[str, Any]
    creator: str
    logical_ts: int
    header: Optional[RecordHeader] = None
    signature: str = ""

    def signing_bytes(self) -> bytes:
        return self.unsigned_bytes

    def model_copy(self, *, update: Optional[Dict[str, Any]] = None, deep: bool = False) -> "RecordOp":
        copied = super().model_copy(update=update, deep=deep)
        for name in _CACHED_DIGESTS:
            copied.__dict__.pop(name, None)
        return copied

    @cached_property
    def unsigned_bytes(self) -> bytes:
        return canonical_json(self.model_dump(mode="json", exclude={"signature"}))

    @cached_property
    def op_id(self) -> str:
        return digest(self.model_dump(mode="json"))

    @cached_property
    def creation_id(self) -> Optional[str]:
        if self.header is None:
            return None
        return compute_record_id(self.header, self.payload, self.creator)

    @cached_property
    def payload_hash(self) -> str:
        return digest(self.payload)

    def merge_key(self) -> Tuple[int, str, str]:
        return (self.logical_ts, self.creator, self.payload_hash)

    def to_wire(self) -> bytes:
        return canonical_json(self.model_dump(mode="json", exclude_none=True))


class RecordVersion(BaseModel):
    model_config = ConfigDict(frozen=True)

    index: int
    payload: Dict[str, Any]
    creator: str
    logical_ts: int
    signature: str


class DataRecord(BaseModel):
    record_id: str
    contract_address: str
    links: List[str]
    schema_tag: str
    creator: str
    versions: List[RecordVersion]

    @property
    def latest(self) -> Dict[str, Any]:
        return dict(self.versions[-1].payload)


def compute_record_id(header: RecordHeader, payload: Mapping[str, Any], creator: str) -> str:
    """Content address of a record's creation bytes."""
    return digest(
        {
            "contract_address": header.contract_address,
            "links": list(header.links),
            "schema_tag": header.schema_tag,
            "payload": dict(payload),
            "creator": creator,
        }
    )


def denylisted_fields(payload: Any, denylist: Set[str]) -> List[str]:
    """Field names anywhere in ``payload`` that belong to the identifying schema."""
    hits: Set[str] = set()
    if isinstance(payload, Mapping):
        for key, value in payload.items():
            if str(key).lower() in denylist:
                hits.add(str(key))
            hits.update(denylisted_fields(value, denylist))
    elif isinstance(payload, list):
        for item in payload:
            hits.update(denylisted_fields(item, denylist))
    return sorted(hits)


class _RecordState:
    __slots__ = ("create", "appends")

    def __init__(self, create: RecordOp):
        self.create = create
        self.appends: List[Tuple[Tuple[int, str, str], RecordOp]] = []

    def ordered(self) -> List[RecordOp]:
        return [self.create] + [op for _, op in self.appends]


class CustodianNode:
    """One consortium node. Local state is a fold of the local op log."""

    def __init__(
        self,
        node_id: str,
        key_registry: Mapping[str, str],
        denylist: Iterable[str] = (),
        trace: Optional[EventTrace] = None,
    ):
        self.node_id = node_id
        self._registry = key_registry
        self._denylist = {f.lower() for f in denylist}
        self.trace = trace
        self._log: List[RecordOp] = []
        self._seen: Set[str] = set()
        self._records: Dict[str, _RecordState] = {}
        self._buffered: Dict[str, List[RecordOp]] = {}
        self._by_contract: Dict[str, Set[str]] = {}
        self.lamport = 0
        self.dropped = 0
        self._lock = threading.RLock()

    # -- fold -------------------------------------------------------------------

    def _verify(self, op: RecordOp) -> Optional[str]:
        public_key = self._registry.get(op.creator)
        if public_key is None:
            return "creator is not a consortium custodian"
        if not verify_signature(public_key, op.signature, op.signing_bytes()):
            return "signature mismatch"
        if op.op_kind == "create":
            if op.header is None:
                return "create without header"
            if op.creation_id != op.record_id:
                return "record id does not match creation bytes"
        elif op.header is not None:
            return "append carries a header"
        if denylisted_fields(op.payload, self._denylist):
            return "identifying field in payload"
        return None

    def receive(self, op: RecordOp) -> bool:
        """Apply ``op`` once; invalid ops are dropped and counted."""
        with self._lock:
            op_id = op.op_id
            if op_id in self._seen:
                return False
            problem = self._verify(op)
            if problem is not None:
                self.dropped += 1
                RECORD_OPS_DROPPED.labels(node=self.node_id).inc()
                if self.trace is not None:
                    self.trace.record(
                        "record",
                        "dropped",
                        {"node": self.node_id, "record_id": op.record_id, "reason": problem},
                    )
                logger.warning("record.op_dropped", node=self.node_id, reason=problem)
                return False
            self._seen.add(op_id)
            self._log.append(op)
            self.lamport = max(self.lamport, op.logical_ts)
            self._fold(op)
            return True

    def _fold(self, op: RecordOp) -> None:
        if op.op_kind == "create":
            state = self._records.get(op.record_id)
            if state is None:
                state = _RecordState(op)
                self._records[op.record_id] = state
                self._by_contract.setdefault(op.header.contract_address, set()).add(op.record_id)
            elif op.merge_key() < state.create.merge_key():
                state.create = op
            for pending in self._buffered.pop(op.record_id, []):
                self._insert_append(state, pending)
        else:
            state = self._records.get(op.record_id)
            if state is None:
                self._buffered.setdefault(op.record_id, []).append(op)
            else:
                self._insert_append(state, op)

    @staticmethod
    def _insert_append(state: _RecordState, op: RecordOp) -> int:
        key = op.merge_key()
        position = bisect.bisect_left([k for k, _ in state.appends], key)
        state.appends.insert(position, (key, op))
        return position + 1

    # -- reads -------------------------------------------------------------------

    def has_record(self, record_id: str) -> bool:
        return record_id in self._records

    def version_index(self, record_id: str, op: RecordOp) -> int:
        with self._lock:
            ordered = self._records[record_id].ordered()
            return [o.op_id for o in ordered].index(op.op_id)

    def _materialize(self, record_id: str) -> DataRecord:
        state = self._records[record_id]
        header = state.create.header
        return DataRecord(
            record_id=record_id,
            contract_address=header.contract_address,
            links=list(header.links),
            schema_tag=header.schema_tag,
            creator=state.create.creator,
            versions=[
                RecordVersion(
                    index=i,
                    payload=dict(op.payload),
                    creator=op.creator,
                    logical_ts=op.logical_ts,
                    signature=op.signature,
                )
                for i, op in enumerate(state.ordered())
            ],
        )

    def get_record(self, record_id: str) -> DataRecord:
        with self._lock:
            if record_id not in self._records:
                raise NotFoundError("unknown record", record_id=record_id)
            return self._materialize(record_id)

    def records(self) -> List[DataRecord]:
        with self._lock:
            return [self._materialize(r) for r in sorted(self._records)]

    def records_for_contract(self, contract_address: str) -> List[DataRecord]:
        with self._lock:
            return [self._materialize(r) for r in sorted(self._by_contract.get(contract_address, ()))]

    def latest_rows(self) -> List[Dict[str, Any]]:
        """Flat rows of every record's latest version, for query evaluation."""
        with self._lock:
            rows = []
            for record_id in sorted(self._records):
                state = self._records[record_id]
                rows.append(
                    {
                        "record_id": record_id,
                        "contract_address": state.create.header.contract_address,
                        "schema_tag": state.create.header.schema_tag,
                        "payload": state.ordered()[-1].payload,
                    }
                )
            return rows

    @property
    def buffered(self) -> int:
        return sum(len(v) for v in self._buffered.values())

    # -- export / replay -----------------------------------------------------------

    def export_snapshot(self) -> bytes:
        """Canonical JSON list of records in record_id order."""
        return canonical_json([r.model_dump(mode="json") for r in self.records()])

    def export_log(self) -> bytes:
        with self._lock:
            return to_ndjson(op.model_dump(mode="json") for op in self._log)

    @property
    def log(self) -> List[RecordOp]:
        with self._lock:
            return list(self._log)

    @classmethod
    def replay_log(
        cls,
        node_id: str,
        ops: Iterable[RecordOp | Dict[str, Any] | bytes | str],
        key_registry: Mapping[str, str],
        denylist: Iterable[str] = (),
    ) -> "CustodianNode":
        node = cls(node_id, key_registry, denylist)
        for raw in ops:
            if isinstance(raw, (bytes, str)):
                raw = canonical_loads(raw)
            node.receive(raw if isinstance(raw, RecordOp) else RecordOp.model_validate(raw))
        return node


class InFlight(NamedTuple):
    deliver_at: int
    seq: int
    target: str
    op: RecordOp


class DeliveryPolicy(Protocol):
    """Decides when and in which order replicated ops reach their targets."""

    def delay(self) -> int:
        """Transit time in ms for a newly sent op."""

    def pick(self, ready: int) -> int:
        """Index among the ``ready`` due messages, earliest first, to deliver next."""

    def duplicate(self) -> bool:
        """Whether the next delivery is also re-sent."""


class FifoDelivery:
    """Immediate, in-order, exactly-once delivery."""

    def delay(self) -> int:
        return 0

    def pick(self, ready: int) -> int:
        return 0

    def duplicate(self) -> bool:
        return False


class Consortium:
    """The set of custodian nodes plus the replication outbox between them."""

    def __init__(
        self,
        ledger: Ledger,
        *,
        denylist: Iterable[str],
        schema_tags: Iterable[str],
        clock: Optional[SimulatedClock] = None,
        delivery: Optional[DeliveryPolicy] = None,
        trace: Optional[EventTrace] = None,
    ):
        self.ledger = ledger
        self.denylist = {f.lower() for f in denylist}
        self.schema_tags = set(schema_tags)
        self.clock = clock or SimulatedClock()
        self.delivery: DeliveryPolicy = delivery or FifoDelivery()
        self.trace = trace if trace is not None else ledger.trace
        self.whitelist = QueryWhitelist(denylist=self.denylist, clock=self.clock)
        self.registry: Dict[str, str] = {}
        self.nodes: Dict[str, CustodianNode] = {}
        self._node_of: Dict[str, str] = {}
        self._in_flight: List[InFlight] = []
        self._seq = 0
        self._lock = threading.RLock()

    def add_node(self, node_id: str, custodian: KeyPair) -> CustodianNode:
        if node_id in self.nodes:
            raise ValidationFailure(f"node '{node_id}' already exists")
        self.registry[custodian.address] = custodian.public_key_hex
        node = CustodianNode(node_id, self.registry, self.denylist, self.trace)
        self.nodes[node_id] = node
        self._node_of[custodian.address] = node_id
        return node

    def node_for(self, custodian: str) -> CustodianNode:
        node_id = self._node_of.get(custodian)
        if node_id is None:
            raise ForbiddenError("principal is not a consortium custodian")
        return self.nodes[node_id]

    def default_node(self) -> CustodianNode:
        if not self.nodes:
            raise NotFoundError("consortium has no nodes")
        return self.nodes[sorted(self.nodes)[0]]

    def _node(self, node_id: Optional[str]) -> CustodianNode:
        if node_id is None:
            return self.default_node()
        if node_id not in self.nodes:
            raise NotFoundError(f"unknown node '{node_id}'")
        return self.nodes[node_id]

    def _check_payload(self, payload: Mapping[str, Any]) -> Dict[str, Any]:
        if not isinstance(payload, Mapping) or not payload:
            raise ValidationFailure("record payload must be a non-empty mapping")
        leaked = denylisted_fields(payload, self.denylist)
        if leaked:
            raise RejectedError(f"identifying field '{leaked[0]}' in record payload", field=leaked[0])
        return dict(payload)

    def _sign(self, custodian: KeyPair, op: RecordOp) -> RecordOp:
        return op.model_copy(update={"signature": custodian.sign_hex(op.signing_bytes())})

    # -- writes --------------------------------------------------------------------

    def create_record(
        self,
        custodian: KeyPair,
        contract_address: str,
        links: Sequence[str],
        schema_tag: str,
        payload: Mapping[str, Any],
    ) -> str:
        """Create a record at the custodian's node and broadcast it."""
        with self._lock:
            node = self.node_for(custodian.address)
            clean = self._check_payload(payload)
            if schema_tag not in self.schema_tags:
                raise ValidationFailure(f"unknown schema tag '{schema_tag}'")
            if not self.ledger.has_contract(contract_address):
                raise RejectedError("contract address does not exist on the ledger")
            for link in links:
                if not node.has_record(link):
                    raise RejectedError(f"dangling link {link}", link=link)
            header = RecordHeader(contract_address=contract_address, links=list(links), schema_tag=schema_tag)
            record_id = compute_record_id(header, clean, custodian.address)
            if node.has_record(record_id):
                return record_id
            op = self._sign(
                custodian,
                RecordOp(
                    op_kind="create",
                    record_id=record_id,
                    payload=clean,
                    creator=custodian.address,
                    logical_ts=node.lamport + 1,
                    header=header,
                ),
            )
            self.replicate(node.node_id, op)
        self.trace.record(
            "record",
            "created",
            {"record_id": record_id, "contract_address": contract_address, "schema_tag": schema_tag},
            actor=custodian.address,
        )
        return record_id

    def append_version(self, custodian: KeyPair, record_id: str, payload: Mapping[str, Any]) -> int:
        """Append a payload version; any consortium custodian may append."""
        with self._lock:
            node = self.node_for(custodian.address)
            if not node.has_record(record_id):
                raise NotFoundError("unknown record", record_id=record_id)
            clean = self._check_payload(payload)
            op = self._sign(
                custodian,
                RecordOp(
                    op_kind="append",
                    record_id=record_id,
                    payload=clean,
                    creator=custodian.address,
                    logical_ts=node.lamport + 1,
                ),
            )
            self.replicate(node.node_id, op)
            index = node.version_index(record_id, op)
        self.trace.record(
            "record",
            "appended",
            {"record_id": record_id, "version_index": index},
            actor=custodian.address,
        )
        return index

    # -- replication -----------------------------------------------------------------

    def replicate(self, origin_node: str, op: RecordOp) -> None:
        """Apply at the origin and queue delivery to every other node."""
        with self._lock:
            if not self.nodes[origin_node].receive(op):
                raise RejectedError("op rejected at its origin node")
            for node_id in sorted(self.nodes):
                if node_id != origin_node:
                    self._enqueue(node_id, op)

    def _enqueue(self, target: str, op: RecordOp) -> None:
        self._seq += 1
        message = InFlight(self.clock.now() + self.delivery.delay(), self._seq, target, op)
        bisect.insort(self._in_flight, message, key=lambda m: (m.deliver_at, m.seq))

    def inject(self, target: str, op: RecordOp) -> None:
        """Queue a raw op for one node, bypassing the origin checks."""
        with self._lock:
            self._enqueue(target, op)

    def pending(self) -> int:
        return len(self._in_flight)

    def deliver(self, now: Optional[int] = None, max_ops: Optional[int] = None) -> int:
        """Deliver in-flight ops due by ``now`` (all of them if ``now`` is None)."""
        delivered = 0
        with self._lock:
            while self._in_flight and (max_ops is None or delivered < max_ops):
                if now is None:
                    ready = len(self._in_flight)
                else:
                    ready = bisect.bisect_right(self._in_flight, now, key=lambda m: m.deliver_at)
                if ready == 0:
                    break
                message = self._in_flight.pop(self.delivery.pick(ready))
                if self.delivery.duplicate():
                    self._enqueue(message.target, message.op)
                self.nodes[message.target].receive(message.op)
                delivered += 1
        return delivered

    def converge(self) -> int:
        """Deliver every outstanding op."""
        return self.deliver(now=None)

    def is_converged(self) -> bool:
        snapshots = {node.export_snapshot() for node in self.nodes.values()}
        return not self._in_flight and len(snapshots) <= 1

    # -- reads ------------------------------------------------------------------------

    def query(
        self,
        caller: str,
        query_name: str,
        params: Optional[Dict[str, Any]] = None,
        role: Optional[Role] = None,
        node_id: Optional[str] = None,
    ) -> QueryResult:
        doc = self.whitelist.get(query_name)
        if role is not None and role not in doc.allowed_roles:
            raise ForbiddenError("caller role may not run this query", query=query_name)
        result = evaluate_query(doc, self._node(node_id).latest_rows(), params or {})
        logger.debug("record.query", query=query_name, caller=caller[:16], rows=result.count)
        return result

    def reverse_lookup(self, caller: str, contract_address: str, node_id: Optional[str] = None) -> List[DataRecord]:
        return self._node(node_id).records_for_contract(contract_address)

    def get_record(self, record_id: str, node_id: Optional[str] = None) -> DataRecord:
        return self._node(node_id).get_record(record_id)

    def snapshots(self) -> Dict[str, bytes]:
        return {node_id: self.nodes[node_id].export_snapshot() for node_id in sorted(self.nodes)}
