"""
Canonical JSON encoding and hashing helpers.

Everything that is signed, hashed or exported goes through ``canonical_json``
so that two processes always produce the same bytes for the same value.
"""

import hashlib
from typing import Any, Iterable, List

import orjson
from pydantic import BaseModel

_OPTIONS = orjson.OPT_SORT_KEYS


def _default(obj: Any) -> Any:
    if isinstance(obj, (bytes, bytearray)):
        return bytes(obj).hex()
    if isinstance(obj, BaseModel):
        return obj.model_dump(mode="json")
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"Type is not canonically serializable: {type(obj).__name__}")


def canonical_json(obj: Any) -> bytes:
    """Serialize ``obj`` with sorted keys, no insignificant whitespace, UTF-8."""
    return orjson.dumps(obj, default=_default, option=_OPTIONS)


def canonical_loads(data: bytes | str) -> Any:
    return orjson.loads(data)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest(obj: Any) -> str:
    """SHA-256 (hex) of the canonical encoding of ``obj``."""
    return sha256_hex(canonical_json(obj))


def to_ndjson(items: Iterable[Any]) -> bytes:
    """One canonical JSON document per line, trailing newline included."""
    lines: List[bytes] = [canonical_json(item) for item in items]
    if not lines:
        return b""
    return b"\n".join(lines) + b"\n"


def from_ndjson(data: bytes | str) -> List[Any]:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return [orjson.loads(line) for line in data.splitlines() if line.strip()]


def derive_seed(root: int, label: str) -> int:
    """Derive an independent 64-bit seed for a named component."""
    raw = hashlib.sha256(f"{root}:{label}".encode("utf-8")).digest()
    return int.from_bytes(raw[:8], "big")
