"""Deterministic discrete-event core: virtual clock, event queue, seeded RNG streams."""
from __future__ import annotations

import heapq
import random
from typing import Callable

_TIME, _SEQ, _FN, _LABEL, _ALIVE = range(5)

SEED_MASK = (1 << 64) - 1


class InvariantError(RuntimeError):
    """A runtime contract the simulator relies on was violated."""


class EventQueue:
    """Time-ordered event dispatcher with stable FIFO tie-breaking.

    Times are integer microseconds of virtual time. Events scheduled for the
    same instant dispatch in insertion order. Cancellation is lazy: the heap
    entry stays queued but is skipped when it surfaces.
    """

    def __init__(self, record_dispatch: bool = False,
                 checker: Callable[[], None] | None = None,
                 check_interval: int = 1024):
        self.now = 0
        self.dispatched = 0
        self._heap: list[list] = []
        self._seq = 0
        self._checker = checker
        self._check_interval = max(1, check_interval)
        self.dispatch_log: list[tuple[int, int, str]] | None = (
            [] if record_dispatch else None
        )

    def schedule(self, fire_time: int, fn: Callable[[], None],
                 label: str = "event") -> list:
        """Enqueue fn to run at fire_time; returns a handle usable with cancel()."""
        if fire_time < self.now:
            raise InvariantError(
                f"event {label!r} scheduled at {fire_time} behind clock {self.now}"
            )
        entry = [fire_time, self._seq, fn, label, True]
        self._seq += 1
        heapq.heappush(self._heap, entry)
        return entry

    def cancel(self, entry: list) -> None:
        entry[_ALIVE] = False
        entry[_FN] = None

    def run_until(self, t_end: int) -> int:
        """Dispatch every live event with fire_time <= t_end, in order.

        Returns the number of events dispatched by this call. The clock ends
        at t_end if events remain beyond it, otherwise at the last dispatched
        time (unchanged if nothing ran).
        """
        heap = self._heap
        log = self.dispatch_log
        checker = self._checker
        pop = heapq.heappop
        count = 0
        countdown = self._check_interval
        while heap and heap[0][0] <= t_end:
            entry = pop(heap)
            if not entry[4]:
                continue
            self.now = entry[0]
            if log is not None:
                log.append((entry[0], entry[1], entry[3]))
            entry[2]()
            count += 1
            if checker is not None:
                countdown -= 1
                if countdown == 0:
                    countdown = self._check_interval
                    checker()
        self.dispatched += count
        if heap:
            self.now = t_end
        if checker is not None:
            checker()
        return count


class RngStream:
    """One deterministic draw stream; independent per (path, direction)."""

    __slots__ = ("stream_id", "_rng")

    def __init__(self, seed: int, stream_id: int):
        self.stream_id = stream_id
        # Disjoint derived seeds as long as stream_id < 4096.
        self._rng = random.Random((seed & SEED_MASK) * 4096 + stream_id)

    def bernoulli(self, p: float) -> bool:
        """True with probability p; always consumes exactly one draw."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"probability out of range: {p}")
        return self._rng.random() < p


class RngStreams:
    """Family of independent streams derived from one 64-bit run seed."""

    def __init__(self, seed: int):
        self.seed = seed & SEED_MASK
        self._streams: dict[int, RngStream] = {}

    def stream(self, stream_id: int) -> RngStream:
        s = self._streams.get(stream_id)
        if s is None:
            s = RngStream(self.seed, stream_id)
            self._streams[stream_id] = s
        return s
