"""
Custodian-approved query documents.

A query is declarative: a predicate tree over record fields, a projection
list, declared parameter types and optionally a ranking or an aggregation.
Only documents present in the versioned ``QueryWhitelist`` can be executed.
"""

import math
import threading
from typing import Any, Dict, Iterable, List, Literal, Optional, Sequence

import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import predicates
from .canonical import to_ndjson
from .clock import SimulatedClock
from .errors import NotFoundError, RejectedError, ValidationFailure
from .models import Role

logger = structlog.get_logger(__name__)

ParamType = Literal["number", "integer", "string", "boolean", "list"]


class Ranking(BaseModel):
    """Keep the top ``ceil(p / 100 * n)`` matches by ``field``; p comes from a parameter."""

    field: str
    percentile_param: str
    descending: bool = True


class Aggregation(BaseModel):
    op: Literal["mean", "count", "sum", "min", "max"]
    field: Optional[str] = None

    @model_validator(mode="after")
    def _field_required(self) -> "Aggregation":
        if self.op != "count" and not self.field:
            raise ValueError(f"aggregation '{self.op}' needs a field")
        return self


class QueryDocument(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = Field(..., min_length=1)
    description: str = ""
    schema_tag: Optional[str] = None
    predicate: Dict[str, Any] = Field(default_factory=lambda: dict(predicates.TRUE))
    projection: List[str] = Field(default_factory=list)
    params: Dict[str, ParamType] = Field(default_factory=dict)
    ranking: Optional[Ranking] = None
    aggregation: Optional[Aggregation] = None
    allowed_roles: List[Role] = Field(default_factory=lambda: [Role.THIRD_PARTY, Role.CUSTODIAN])

    @model_validator(mode="after")
    def _check(self) -> "QueryDocument":
        predicates.validate(self.predicate)
        missing = predicates.referenced_params(self.predicate) - set(self.params)
        if missing:
            raise ValueError(f"undeclared parameters: {', '.join(sorted(missing))}")
        if self.ranking is not None:
            if self.params.get(self.ranking.percentile_param) not in ("number", "integer"):
                raise ValueError("the percentile parameter must be declared numeric")
            if self.aggregation is not None:
                raise ValueError("a query either ranks or aggregates")
        if self.aggregation is not None and self.projection:
            raise ValueError("aggregate queries return no projection")
        return self

    def referenced_fields(self) -> List[str]:
        fields = set(self.projection) | predicates.referenced_fields(self.predicate)
        if self.ranking is not None:
            fields.add(self.ranking.field)
        if self.aggregation is not None and self.aggregation.field:
            fields.add(self.aggregation.field)
        return sorted(fields)


class QueryRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    contract_address: str
    projection: Dict[str, Any] = Field(default_factory=dict)


class QueryResult(BaseModel):
    query: str
    rows: List[QueryRow] = Field(default_factory=list)
    aggregate: Optional[float] = None
    count: int = 0

    @property
    def contract_addresses(self) -> List[str]:
        return [row.contract_address for row in self.rows]


class WhitelistChange(BaseModel):
    model_config = ConfigDict(frozen=True)

    version: int
    action: Literal["add", "remove"]
    name: str
    actor: str
    at: int
    document: Optional[Dict[str, Any]] = None


def parse_query_document(raw: Dict[str, Any] | QueryDocument) -> QueryDocument:
    if isinstance(raw, QueryDocument):
        return raw
    try:
        return QueryDocument.model_validate(raw)
    except ValidationError as exc:
        raise ValidationFailure(f"malformed query document: {exc.errors()[0]['msg']}")


_PARAM_CHECKS = {
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "string": lambda v: isinstance(v, str),
    "boolean": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, list),
}


def check_params(doc: QueryDocument, params: Dict[str, Any]) -> None:
    extra = sorted(set(params) - set(doc.params))
    if extra:
        raise ValidationFailure(f"unexpected parameters: {', '.join(extra)}", query=doc.name)
    for name, kind in doc.params.items():
        if name not in params:
            raise ValidationFailure(f"missing parameter '{name}'", query=doc.name)
        if not _PARAM_CHECKS[kind](params[name]):
            raise ValidationFailure(f"parameter '{name}' must be of type {kind}", query=doc.name)
    if doc.ranking is not None:
        p = params[doc.ranking.percentile_param]
        if not 0 < p <= 100:
            raise ValidationFailure("percentile must be in (0, 100]", query=doc.name)


def _sort_key(value: Any) -> Any:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        return (1, str(value))
    return (0, value)


def evaluate_query(
    doc: QueryDocument,
    records: Iterable[Dict[str, Any]],
    params: Dict[str, Any],
) -> QueryResult:
    """Run ``doc`` over flat records ``{contract_address, schema_tag, payload}``."""
    check_params(doc, params)
    matches = [
        r
        for r in records
        if (doc.schema_tag is None or r["schema_tag"] == doc.schema_tag)
        and predicates.evaluate(doc.predicate, r["payload"], params)
    ]

    if doc.aggregation is not None:
        return QueryResult(query=doc.name, aggregate=_aggregate(doc.aggregation, matches), count=len(matches))

    if doc.ranking is not None:
        field = doc.ranking.field
        ranked = [r for r in matches if isinstance(r["payload"].get(field), (int, float))]
        ranked.sort(key=lambda r: r["contract_address"])
        ranked.sort(key=lambda r: r["payload"][field], reverse=doc.ranking.descending)
        keep = math.ceil(params[doc.ranking.percentile_param] / 100.0 * len(ranked))
        selected = ranked[:keep]
    else:
        selected = sorted(
            matches,
            key=lambda r: (r["contract_address"], [_sort_key(r["payload"].get(f)) for f in doc.projection]),
        )

    rows = [
        QueryRow(
            contract_address=r["contract_address"],
            projection={f: r["payload"][f] for f in doc.projection if f in r["payload"]},
        )
        for r in selected
    ]
    return QueryResult(query=doc.name, rows=rows, count=len(rows))


def _aggregate(aggregation: Aggregation, matches: Sequence[Dict[str, Any]]) -> Optional[float]:
    if aggregation.op == "count":
        return float(len(matches))
    values = [
        r["payload"][aggregation.field]
        for r in matches
        if isinstance(r["payload"].get(aggregation.field), (int, float))
        and not isinstance(r["payload"].get(aggregation.field), bool)
    ]
    if not values:
        return None
    if aggregation.op == "sum":
        return float(sum(values))
    if aggregation.op == "min":
        return float(min(values))
    if aggregation.op == "max":
        return float(max(values))
    return float(sum(values)) / len(values)


class QueryWhitelist:
    """Versioned set of approved queries with an append-only change history."""

    def __init__(self, denylist: Iterable[str] = (), clock: Optional[SimulatedClock] = None):
        self._denylist = {f.lower() for f in denylist}
        self._clock = clock or SimulatedClock()
        self._active: Dict[str, QueryDocument] = {}
        self._history: List[WhitelistChange] = []
        self._lock = threading.Lock()

    @property
    def version(self) -> int:
        return len(self._history)

    def manage(self, actor: str, action: str, document: Dict[str, Any] | QueryDocument | str) -> int:
        """Add or remove a query; returns the new whitelist version."""
        with self._lock:
            if action == "add":
                doc = parse_query_document(document)  # type: ignore[arg-type]
                leaked = sorted(f for f in doc.referenced_fields() if f.lower() in self._denylist)
                if leaked:
                    raise ValidationFailure(
                        f"query references identifying fields: {', '.join(leaked)}", fields=leaked
                    )
                self._active[doc.name] = doc
                name, dumped = doc.name, doc.model_dump(mode="json")
            elif action == "remove":
                name = document if isinstance(document, str) else (
                    document.name if isinstance(document, QueryDocument) else document.get("name", "")
                )
                if name not in self._active:
                    raise NotFoundError(f"query '{name}' is not whitelisted")
                del self._active[name]
                dumped = None
            else:
                raise ValidationFailure(f"unknown whitelist action '{action}'")
            change = WhitelistChange(
                version=len(self._history) + 1,
                action=action,
                name=name,
                actor=actor,
                at=self._clock.now(),
                document=dumped,
            )
            self._history.append(change)
        logger.info("whitelist.changed", action=action, query=name, version=change.version)
        return change.version

    def get(self, name: str) -> QueryDocument:
        doc = self._active.get(name)
        if doc is None:
            raise RejectedError("query not approved", query=name)
        return doc

    def names(self) -> List[str]:
        return sorted(self._active)

    def history(self) -> List[WhitelistChange]:
        return list(self._history)

    def export_history(self) -> bytes:
        return to_ndjson(c.model_dump(mode="json") for c in self._history)
