"""Integer tick clock shared by the engine, the simulator and the live ticker."""
from __future__ import annotations

import math

DEFAULT_TICK_MS = 10


class VirtualClock:
    """Discrete clock. Time only moves forward, one or more whole ticks at a time."""

    def __init__(self, tick_ms: int = DEFAULT_TICK_MS, start: int = 0) -> None:
        if tick_ms <= 0:
            raise ValueError("tick_ms must be positive")
        self.tick_ms = tick_ms
        self.tick = start

    def now(self) -> int:
        return self.tick

    def now_ms(self) -> int:
        return self.tick * self.tick_ms

    def advance(self, ticks: int = 1) -> int:
        if ticks < 0:
            raise ValueError("clock cannot move backwards")
        self.tick += ticks
        return self.tick

    def ticks_for_ms(self, ms: float) -> int:
        return math.ceil(ms / self.tick_ms)

    def bytes_per_tick(self, kbps: float) -> int:
        """Whole bytes a ``kbps`` link moves per tick, never zero."""
        return max(1, math.ceil(kbps * self.tick_ms / 8))
