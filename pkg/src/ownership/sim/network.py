"""
Seeded replication network.

Implements the record-store ``DeliveryPolicy``: per-message delays drawn from
the configured distribution, lost messages retransmitted after a fixed
timeout, occasional reordering among due messages and duplicated deliveries.
All randomness comes from one generator seeded from the scenario seed.
"""

from typing import Optional

import numpy as np

from ..canonical import derive_seed
from .scenario import NetworkModel


class SeededNetwork:
    def __init__(self, model: Optional[NetworkModel] = None, seed: int = 0):
        self.model = model or NetworkModel()
        self._rng = np.random.default_rng(derive_seed(seed, "network"))
        self.sent = 0
        self.retransmissions = 0
        self.reordered = 0
        self.duplicated = 0

    def _base_delay(self) -> int:
        delay = self.model.delay
        if delay.kind == "uniform":
            return int(self._rng.integers(delay.low, delay.high + 1))
        if delay.kind == "exponential":
            return int(round(self._rng.exponential(delay.mean))) if delay.mean > 0 else 0
        return delay.ms

    def delay(self) -> int:
        self.sent += 1
        total = self._base_delay()
        # each loss costs one retransmission timeout
        while self.model.loss_probability and self._rng.random() < self.model.loss_probability:
            self.retransmissions += 1
            total += self.model.retransmit_ms
        return total

    def pick(self, ready: int) -> int:
        if ready > 1 and self.model.reorder_probability and self._rng.random() < self.model.reorder_probability:
            self.reordered += 1
            return int(self._rng.integers(0, ready))
        return 0

    def duplicate(self) -> bool:
        if self.model.duplicate_probability and self._rng.random() < self.model.duplicate_probability:
            self.duplicated += 1
            return True
        return False

    def stats(self) -> dict:
        return {
            "sent": self.sent,
            "retransmissions": self.retransmissions,
            "reordered": self.reordered,
            "duplicated": self.duplicated,
        }
