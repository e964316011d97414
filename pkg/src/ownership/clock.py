"""Simulated logical clock (integer milliseconds)."""

import threading


class SimulatedClock:
    """Monotone millisecond clock advanced explicitly by the simulator."""

    def __init__(self, start_ms: int = 0):
        if start_ms < 0:
            raise ValueError("clock cannot start before zero")
        self._now = start_ms
        self._lock = threading.Lock()

    def now(self) -> int:
        return self._now

    def advance(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += delta_ms
            return self._now

    def advance_to(self, t_ms: int) -> int:
        with self._lock:
            if t_ms > self._now:
                self._now = t_ms
            return self._now

    def tick(self) -> int:
        """Advance by one millisecond and return the new time."""
        return self.advance(1)
