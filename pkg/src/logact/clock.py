"""Wall clock and a virtual clock for deterministic runs."""

from __future__ import annotations

import threading
import time


class RealClock:
    def now_ms(self) -> int:
        return int(time.time() * 1000)

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)


class VirtualClock:
    """Milliseconds that only move when told to.  ``sleep`` advances time."""

    def __init__(self, start_ms: int = 1_700_000_000_000):
        self._now = start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance(self, ms: int) -> None:
        with self._lock:
            self._now += max(0, int(ms))

    def advance_to(self, ms: int) -> None:
        with self._lock:
            self._now = max(self._now, int(ms))

    def sleep(self, seconds: float) -> None:
        self.advance(round(seconds * 1000))
