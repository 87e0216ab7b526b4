"""Deterministic discrete-event engine.

The clock is an integer nanosecond counter, never a float, so that replaying a
simulation with the same inputs produces byte-identical traces on any
platform. Events are totally ordered by (timestamp, scheduling sequence
number); ties therefore resolve FIFO in scheduling order.
"""

from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Iterable

# Nanoseconds since simulation start.
SimTime = int

NS_PER_US = 1_000
NS_PER_S = 1_000_000_000


def ns_from_us(us: float) -> SimTime:
    """Convert a real-valued microsecond duration to integer nanoseconds.

    Rounds half-to-even: this is the single boundary where cost-model floats
    enter the integer clock domain.
    """
    return round(us * NS_PER_US)


def ns_from_s(seconds: float) -> SimTime:
    return round(seconds * NS_PER_S)


class EventKind(str, Enum):
    REQUEST_ARRIVAL = "REQUEST_ARRIVAL"
    BATCH_START = "BATCH_START"
    BATCH_COMPLETE = "BATCH_COMPLETE"
    PREFILL_COMPLETE = "PREFILL_COMPLETE"
    MEMORY_AVAILABLE = "MEMORY_AVAILABLE"
    KV_CACHE_TRANSFER_START = "KV_CACHE_TRANSFER_START"
    KV_CACHE_TRANSFER_DONE = "KV_CACHE_TRANSFER_DONE"
    ATTN_COMPUTE_DONE = "ATTN_COMPUTE_DONE"
    A_TO_F_TRANSFER_DONE = "A_TO_F_TRANSFER_DONE"
    FFN_COMPUTE_DONE = "FFN_COMPUTE_DONE"
    F_TO_A_TRANSFER_DONE = "F_TO_A_TRANSFER_DONE"
    TOKEN_EMITTED = "TOKEN_EMITTED"
    REQUEST_COMPLETE = "REQUEST_COMPLETE"


class SimCoreError(Exception):
    """Base class for event-engine errors."""


class SchedulingInPast(SimCoreError):
    """An event was scheduled with a timestamp earlier than the clock."""


class UnhandledEventKind(SimCoreError):
    """An event was popped whose kind has no registered handler."""


class EventBudgetExceeded(SimCoreError):
    """The configured max-event cap was hit; guards against runaway loops."""


@dataclass(frozen=True)
class SimEvent:
    timestamp: SimTime
    seq: int
    kind: EventKind
    payload: dict[str, Any]

    def sort_key(self) -> tuple[int, int]:
        return (self.timestamp, self.seq)


def _canonical_payload(payload: dict[str, Any]) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


class EventTrace:
    """Append-only record of processed events, in pop order.

    The summary hash covers the exported byte stream, so two traces are
    identical iff their hashes match.
    """

    def __init__(self) -> None:
        self.records: list[SimEvent] = []

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterable[SimEvent]:
        return iter(self.records)

    def append(self, event: SimEvent) -> None:
        self.records.append(event)

    def lines(self) -> list[str]:
        return [
            f"{ev.timestamp},{ev.seq},{ev.kind.value},{_canonical_payload(ev.payload)}"
            for ev in self.records
        ]

    def body_bytes(self) -> bytes:
        body = "\n".join(self.lines())
        if body:
            body += "\n"
        return body.encode("utf-8")

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.body_bytes()).hexdigest()

    def export(self, path: str) -> None:
        """Write newline-delimited records plus a trailing hash footer."""
        body = self.body_bytes()
        digest = hashlib.sha256(body).hexdigest()
        with open(path, "wb") as fh:
            fh.write(body)
            fh.write(f"#hash={digest}\n".encode("utf-8"))

    def events_of_kind(self, kind: EventKind) -> list[SimEvent]:
        return [ev for ev in self.records if ev.kind is kind]


Handler = Callable[[SimEvent], None]


class Simulator:
    """Single-threaded event loop over a (timestamp, seq)-ordered queue.

    Handlers may read the clock and schedule future events; they never set
    the clock. One Simulator instance drives exactly one simulation.
    """

    DEFAULT_MAX_EVENTS = 50_000_000

    def __init__(self, max_events: int | None = None) -> None:
        self.now: SimTime = 0
        self.trace = EventTrace()
        self.max_events = self.DEFAULT_MAX_EVENTS if max_events is None else max_events
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._next_seq = 0
        self._processed = 0
        self._handlers: dict[EventKind, Handler] = {}

    # -- registration ------------------------------------------------------

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    # -- scheduling --------------------------------------------------------

    def schedule(
        self, timestamp: SimTime, kind: EventKind, payload: dict[str, Any] | None = None
    ) -> SimEvent:
        if timestamp < self.now:
            raise SchedulingInPast(
                f"cannot schedule {kind.value} at t={timestamp}ns; clock is {self.now}ns"
            )
        event = SimEvent(timestamp, self._next_seq, kind, payload or {})
        self._next_seq += 1
        heapq.heappush(self._heap, (event.timestamp, event.seq, event))
        return event

    def schedule_after(
        self, delay: SimTime, kind: EventKind, payload: dict[str, Any] | None = None
    ) -> SimEvent:
        return self.schedule(self.now + delay, kind, payload)

    def peek_time(self) -> SimTime | None:
        return self._heap[0][0] if self._heap else None

    def pending(self) -> int:
        return len(self._heap)

    # -- run loop ----------------------------------------------------------

    def _dispatch_next(self) -> None:
        _, _, event = heapq.heappop(self._heap)
        self._processed += 1
        if self._processed > self.max_events:
            raise EventBudgetExceeded(
                f"processed more than {self.max_events} events; aborting"
            )
        self.now = event.timestamp
        handler = self._handlers.get(event.kind)
        if handler is None:
            raise UnhandledEventKind(f"no handler registered for {event.kind.value}")
        self.trace.append(event)
        handler(event)

    def run_until(self, t_end: SimTime) -> EventTrace:
        """Process every event with timestamp <= t_end; leave the clock at t_end."""
        while self._heap and self._heap[0][0] <= t_end:
            self._dispatch_next()
        if t_end > self.now:
            self.now = t_end
        return self.trace

    def run_to_completion(self) -> EventTrace:
        """Process events until the queue is empty."""
        while self._heap:
            self._dispatch_next()
        return self.trace
