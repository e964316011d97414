"""
Declarative predicate trees.

A predicate is a JSON document, never code::

    {"and": [{"eq": ["course", {"param": "course"}]}, {"ge": ["mark", 50]}]}

Leaves compare a payload field with a literal or a ``{"param": name}``
placeholder bound at evaluation time.
"""

from typing import Any, Dict, Iterable, Mapping, Set

from .errors import ValidationFailure

COMPARISONS = ("eq", "ne", "lt", "le", "gt", "ge")
LEAF_OPS = COMPARISONS + ("in", "contains", "exists")
BRANCH_OPS = ("and", "or", "not")

Predicate = Dict[str, Any]

TRUE: Predicate = {"and": []}


def from_criteria(criteria: Mapping[str, Any]) -> Predicate:
    """Accept a predicate document or a flat ``{field: value}`` equality map."""
    if not isinstance(criteria, Mapping):
        raise ValidationFailure("criteria must be a mapping")
    if len(criteria) == 1 and next(iter(criteria)) in LEAF_OPS + BRANCH_OPS:
        return dict(criteria)
    if not criteria:
        raise ValidationFailure("empty criteria")
    return {"and": [{"eq": [field, value]} for field, value in sorted(criteria.items())]}


def validate(doc: Any, allowed_fields: Iterable[str] | None = None) -> None:
    """Raise ``ValidationFailure`` if ``doc`` is not a well-formed predicate."""
    allowed = set(allowed_fields) if allowed_fields is not None else None
    _validate(doc, allowed)


def _validate(doc: Any, allowed: Set[str] | None) -> None:
    if not isinstance(doc, dict) or len(doc) != 1:
        raise ValidationFailure("a predicate node has exactly one operator")
    (op, arg), = doc.items()
    if op in ("and", "or"):
        if not isinstance(arg, list):
            raise ValidationFailure(f"'{op}' takes a list of predicates")
        for child in arg:
            _validate(child, allowed)
        return
    if op == "not":
        _validate(arg, allowed)
        return
    if op == "exists":
        _check_field(arg, allowed)
        return
    if op not in LEAF_OPS:
        raise ValidationFailure(f"unknown predicate operator '{op}'")
    if not isinstance(arg, list) or len(arg) != 2:
        raise ValidationFailure(f"'{op}' takes [field, value]")
    _check_field(arg[0], allowed)
    if op == "in" and not (isinstance(arg[1], list) or _is_param(arg[1])):
        raise ValidationFailure("'in' takes a list of values")


def _check_field(field: Any, allowed: Set[str] | None) -> None:
    if not isinstance(field, str) or not field:
        raise ValidationFailure("predicate fields are non-empty strings")
    if allowed is not None and field not in allowed:
        raise ValidationFailure(f"field '{field}' is not queryable", field=field)


def _is_param(value: Any) -> bool:
    return isinstance(value, dict) and set(value) == {"param"} and isinstance(value["param"], str)


def referenced_fields(doc: Predicate) -> Set[str]:
    (op, arg), = doc.items()
    if op in ("and", "or"):
        out: Set[str] = set()
        for child in arg:
            out |= referenced_fields(child)
        return out
    if op == "not":
        return referenced_fields(arg)
    if op == "exists":
        return {arg}
    return {arg[0]}


def referenced_params(doc: Predicate) -> Set[str]:
    (op, arg), = doc.items()
    if op in ("and", "or"):
        out: Set[str] = set()
        for child in arg:
            out |= referenced_params(child)
        return out
    if op == "not":
        return referenced_params(arg)
    if op == "exists":
        return set()
    return {arg[1]["param"]} if _is_param(arg[1]) else set()


def _resolve(value: Any, params: Mapping[str, Any]) -> Any:
    if _is_param(value):
        name = value["param"]
        if name not in params:
            raise ValidationFailure(f"missing query parameter '{name}'", param=name)
        return params[name]
    return value


def _compare(op: str, left: Any, right: Any) -> bool:
    if op == "eq":
        return left == right
    if op == "ne":
        return left != right
    numeric = (int, float)
    same_kind = (
        isinstance(left, numeric) and isinstance(right, numeric)
        and not isinstance(left, bool) and not isinstance(right, bool)
    ) or (isinstance(left, str) and isinstance(right, str))
    if not same_kind:
        return False
    if op == "lt":
        return left < right
    if op == "le":
        return left <= right
    if op == "gt":
        return left > right
    return left >= right


def evaluate(doc: Predicate, record: Mapping[str, Any], params: Mapping[str, Any] | None = None) -> bool:
    """Evaluate a validated predicate against a flat record."""
    params = params or {}
    (op, arg), = doc.items()
    if op == "and":
        return all(evaluate(child, record, params) for child in arg)
    if op == "or":
        return any(evaluate(child, record, params) for child in arg)
    if op == "not":
        return not evaluate(arg, record, params)
    if op == "exists":
        return arg in record
    field, raw = arg
    if field not in record:
        return False
    value = record[field]
    expected = _resolve(raw, params)
    if op == "in":
        return isinstance(expected, list) and value in expected
    if op == "contains":
        return isinstance(value, str) and isinstance(expected, str) and expected in value
    return _compare(op, value, expected)
