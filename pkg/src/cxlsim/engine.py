"""Deterministic discrete-event kernel: clock, event queue, component dispatch.

Time is kept as integer picosecond ticks so that differently clocked buses
never produce fractional-cycle ambiguity. Latencies configured in
nanoseconds are converted once, up front. Events are dispatched in strict
(fire_at, seq) order, which makes two runs with identical inputs
byte-identical, including their dispatch logs.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Callable

TICKS_PER_NS = 1000  # one tick is a picosecond


def ns_to_ticks(ns: float) -> int:
    """Convert a nanosecond latency from config into integer ticks."""
    if ns < 0:
        raise ValueError(f"latency must be >= 0, got {ns}")
    return round(ns * TICKS_PER_NS)


def ticks_to_ns(ticks: int) -> float:
    return ticks / TICKS_PER_NS


class SchedulingInPast(Exception):
    """An event was scheduled behind the current clock.

    This always indicates a latency-arithmetic bug in a component, so it is
    an exception rather than a silently clamped value.
    """


@dataclass(frozen=True, slots=True)
class Event:
    fire_at: int
    seq: int
    target: str
    payload: object


class Engine:
    """Single-threaded event loop shared by every simulated component.

    Components register a handler under a name; events carry the target
    name plus an opaque payload. (fire_at, seq) is a strict total order
    over live events: equal-time events dispatch in insertion order.
    """

    def __init__(self) -> None:
        self.clock: int = 0
        self._queue: list[tuple[int, int, Event]] = []
        self._next_seq: int = 0
        self._handlers: dict[str, Callable[[Event], None]] = {}
        self._probes: list[Callable[[Engine, Event], None]] = []
        self.dispatch_log: list[str] | None = None
        self.last_dispatch_at: int = 0

    def register(self, name: str, handler: Callable[[Event], None]) -> None:
        if name in self._handlers:
            raise ValueError(f"component {name!r} already registered")
        self._handlers[name] = handler

    def add_probe(self, probe: Callable[[Engine, Event], None]) -> None:
        """Install a hook called after every dispatched event (test/audit use)."""
        self._probes.append(probe)

    def enable_dispatch_log(self) -> None:
        self.dispatch_log = []

    def schedule(self, fire_at: int, target: str, payload: object) -> Event:
        if fire_at < self.clock:
            raise SchedulingInPast(
                f"fire_at={fire_at} < clock={self.clock} (target={target})"
            )
        ev = Event(fire_at, self._next_seq, target, payload)
        self._next_seq += 1
        heapq.heappush(self._queue, (fire_at, ev.seq, ev))
        return ev

    def schedule_in(self, delay: int, target: str, payload: object) -> Event:
        return self.schedule(self.clock + delay, target, payload)

    def pending(self) -> int:
        return len(self._queue)

    def run_until(self, limit: int) -> tuple[int, bool]:
        """Dispatch every event with fire_at <= limit.

        Returns (clock, drained). With events left beyond the limit the
        clock rests at the last dispatched fire_at; once the queue drains
        the clock advances to the limit so that bandwidth-over-window
        statistics stay well defined.
        """
        drained = self.drain(limit)
        if drained and limit > self.clock:
            self.clock = limit
        return self.clock, drained

    def drain(self, limit: int) -> bool:
        """Dispatch everything due by `limit` without advancing the clock
        past the last event; True when the queue emptied.

        Unlike run_until, an empty queue leaves the clock at the last
        dispatch, so follow-on work (cache flushes, management commands)
        schedules from where the simulation actually stopped.
        """
        queue = self._queue
        while queue and queue[0][0] <= limit:
            _, _, ev = heapq.heappop(queue)
            self.clock = ev.fire_at
            self.last_dispatch_at = ev.fire_at
            if self.dispatch_log is not None:
                payload = ev.payload
                label = payload if isinstance(payload, str) else type(payload).__name__
                self.dispatch_log.append(
                    f"{ev.fire_at} {ev.seq} {ev.target} {label}"
                )
            self._handlers[ev.target](ev)
            for probe in self._probes:
                probe(self, ev)
        return not queue
