"""
Synthetic identity payloads used as chaff.

``DistributionalChaffGenerator`` resamples field values from the real data
observed so far, weighted by frequency, and perturbs them token by token:
letter runs are redrawn from the pool seen at the same position, digit runs
are replaced by random digits of the same length, separators are kept. The
result has the shape and marginals of real entries without copying any one
of them.

``ConstantChaffGenerator`` emits the same placeholder payload every time; it
exists as a negative control for linkage-attack evaluation.
"""

import re
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from typing import Dict, List, Optional, Tuple

import numpy as np

_TOKEN = re.compile(r"[A-Za-z]+|\d+|[^A-Za-z\d]+")


def _weighted_choice(counter: Counter, rng: np.random.Generator) -> str:
    values = sorted(counter)
    weights = np.array([counter[v] for v in values], dtype=float)
    return values[int(rng.choice(len(values), p=weights / weights.sum()))]


class ChaffGenerator(ABC):
    name = "base"

    @abstractmethod
    def observe(self, payload: Dict[str, str]) -> None:
        """Learn from a real payload."""

    @abstractmethod
    def generate(self, rng: np.random.Generator) -> Dict[str, str]:
        """Produce one synthetic payload."""


class DistributionalChaffGenerator(ChaffGenerator):
    name = "distributional"

    def __init__(self) -> None:
        self._key_sets: Counter = Counter()
        self._values: Dict[str, Counter] = defaultdict(Counter)
        self._letter_pools: Dict[Tuple[str, int], Counter] = defaultdict(Counter)

    def observe(self, payload: Dict[str, str]) -> None:
        self._key_sets[tuple(sorted(payload))] += 1
        for field, value in payload.items():
            self._values[field][value] += 1
            for position, token in enumerate(_TOKEN.findall(value)):
                if token.isalpha():
                    self._letter_pools[(field, position)][token] += 1

    def generate(self, rng: np.random.Generator) -> Dict[str, str]:
        if not self._key_sets:
            raise ValueError("no real payloads observed yet")
        keys = _weighted_choice(Counter({"\x1f".join(k): c for k, c in self._key_sets.items()}), rng)
        payload = {}
        for field in keys.split("\x1f"):
            base = _weighted_choice(self._values[field], rng)
            payload[field] = self._perturb(field, base, rng)
        return payload

    def _perturb(self, field: str, value: str, rng: np.random.Generator) -> str:
        out: List[str] = []
        for position, token in enumerate(_TOKEN.findall(value)):
            if token.isdigit():
                digits = rng.integers(0, 10, size=len(token))
                if token[0] != "0" and len(token) > 1:
                    digits[0] = rng.integers(1, 10)
                out.append("".join(str(d) for d in digits))
            elif token.isalpha():
                pool = self._letter_pools.get((field, position))
                out.append(_weighted_choice(pool, rng) if pool else token)
            else:
                out.append(token)
        return "".join(out)


class ConstantChaffGenerator(ChaffGenerator):
    name = "constant"

    def __init__(self) -> None:
        self._fields: Optional[Tuple[str, ...]] = None

    def observe(self, payload: Dict[str, str]) -> None:
        if self._fields is None:
            self._fields = tuple(sorted(payload))

    def generate(self, rng: np.random.Generator) -> Dict[str, str]:
        if self._fields is None:
            raise ValueError("no real payloads observed yet")
        return {field: f"{field}-placeholder" for field in self._fields}


def make_chaff_generator(kind: str) -> ChaffGenerator:
    generators = {
        DistributionalChaffGenerator.name: DistributionalChaffGenerator,
        ConstantChaffGenerator.name: ConstantChaffGenerator,
    }
    if kind not in generators:
        raise ValueError(f"unknown chaff generator '{kind}'")
    return generators[kind]()
