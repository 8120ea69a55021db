"""Deterministic discrete-event kernel: virtual clock, event queue and seeded RNG.

Time is an integer count of milliseconds.  Events firing at the same instant
are delivered in the order they were scheduled.
"""
from __future__ import annotations

import heapq
import json
import re
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, List, Optional

import numpy as np

SECOND = 1_000
MINUTE = 60 * SECOND
HOUR = 60 * MINUTE
DAY = 24 * HOUR

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

_DURATION_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*(ms|s|m|min|h|d)?\s*$")
_UNITS = {None: 1, "ms": 1, "s": SECOND, "m": MINUTE, "min": MINUTE, "h": HOUR, "d": DAY}


class PastEvent(ValueError):
    """Raised when an event is scheduled before the current clock."""


def parse_time(value: Any) -> int:
    """Convert ``value`` into integer milliseconds.

    Integers are taken as milliseconds; strings may carry a unit suffix
    (``"90s"``, ``"5m"``, ``"17h"``, ``"7d"``).
    """
    if isinstance(value, bool):
        raise TypeError("boolean is not a time value")
    if isinstance(value, int):
        out = value
    elif isinstance(value, float):
        out = int(round(value))
    elif isinstance(value, str):
        m = _DURATION_RE.match(value)
        if not m:
            raise ValueError(f"cannot parse time value {value!r}")
        out = int(round(float(m.group(1)) * _UNITS[m.group(2)]))
    else:
        raise TypeError(f"cannot parse time value {value!r}")
    if out < 0:
        raise ValueError(f"negative time value {value!r}")
    return out


def format_time(ms: int) -> str:
    h, rem = divmod(int(ms), HOUR)
    m, rem = divmod(rem, MINUTE)
    s = rem / SECOND
    return f"{h:02d}:{m:02d}:{s:06.3f}"


class SeededRng:
    """Named, splittable random source.

    Every sub-stream is derived from ``(seed, name)`` alone, so drawing more
    numbers in one module never shifts the values seen by another.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int, path: tuple = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, self.path + (zlib.crc32(name.encode("utf-8")),))

    # thin conveniences over numpy's Generator
    def random(self) -> float:
        return float(self.generator.random())

    def integers(self, low: int, high: int) -> int:
        return int(self.generator.integers(low, high))

    def choice(self, seq, p=None):
        idx = int(self.generator.choice(len(seq), p=p))
        return seq[idx]


@dataclass(order=False)
class SimEvent:
    fire_at: int
    sequence: int
    kind: str
    payload: Dict[str, Any] = field(default_factory=dict)

    def to_record(self) -> Dict[str, Any]:
        return {"fire_at": self.fire_at, "sequence": self.sequence,
                "kind": self.kind, "payload": self.payload}


@dataclass
class EventHandle:
    sequence: int
    fire_at: int


class Simulator:
    """Single-threaded event loop.

    Handlers registered with :meth:`on` are invoked for every delivered event
    of that kind, in registration order.  An optional per-event callback runs
    before the kind handlers.
    """

    def __init__(self, horizon: Optional[int] = None, log_events: bool = True, quiet: Iterable[str] = ()):
        self.now = 0
        self.horizon = horizon
        self._queue: List[tuple] = []
        self._seq = 0
        self._pending: Dict[int, SimEvent] = {}
        self._callbacks: Dict[int, Callable[[SimEvent], None]] = {}
        self._handlers: Dict[str, List[Callable[[SimEvent], None]]] = {}
        self.log_events = log_events
        self.quiet = frozenset(quiet)   # kinds delivered but kept out of the log
        self.event_log: List[Dict[str, Any]] = []
        self.delivered = 0
        self._observers: List[Callable[[SimEvent], None]] = []

    def on(self, kind: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers.setdefault(kind, []).append(handler)

    def observe(self, fn: Callable[[SimEvent], None]) -> None:
        """Call ``fn`` after every delivered event, once its handlers have run."""
        self._observers.append(fn)

    def schedule(self, fire_at: int, kind: str, payload: Optional[Dict[str, Any]] = None,
                 callback: Optional[Callable[[SimEvent], None]] = None) -> EventHandle:
        fire_at = int(fire_at)
        if fire_at < self.now:
            raise PastEvent(f"event {kind!r} at {fire_at} is before now={self.now}")
        ev = SimEvent(fire_at, self._seq, kind, dict(payload or {}))
        self._seq += 1
        heapq.heappush(self._queue, (ev.fire_at, ev.sequence))
        self._pending[ev.sequence] = ev
        if callback is not None:
            self._callbacks[ev.sequence] = callback
        return EventHandle(ev.sequence, ev.fire_at)

    def schedule_in(self, delay: int, kind: str, payload=None, callback=None) -> EventHandle:
        return self.schedule(self.now + int(delay), kind, payload, callback)

    def schedule_event(self, e: SimEvent, callback=None) -> EventHandle:
        """Schedule a prebuilt event; its sequence number is reassigned."""
        return self.schedule(e.fire_at, e.kind, e.payload, callback)

    def cancel(self, handle: EventHandle) -> bool:
        ev = self._pending.pop(handle.sequence, None)
        self._callbacks.pop(handle.sequence, None)
        return ev is not None

    cancel_event = cancel

    def pending_count(self) -> int:
        return len(self._pending)

    def peek_time(self) -> Optional[int]:
        while self._queue and self._queue[0][1] not in self._pending:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def emit(self, kind: str, payload: Optional[Dict[str, Any]] = None) -> None:
        """Record an instantaneous event at the current clock without queueing it."""
        ev = SimEvent(self.now, self._seq, kind, dict(payload or {}))
        self._seq += 1
        self._deliver(ev, None)

    def _deliver(self, ev: SimEvent, callback) -> None:
        self.delivered += 1
        if self.log_events and ev.kind not in self.quiet:
            self.event_log.append(ev.to_record())
        if callback is not None:
            callback(ev)
        for h in self._handlers.get(ev.kind, ()):
            h(ev)
        for fn in self._observers:
            fn(ev)

    def run_until(self, t: int) -> int:
        t = int(t)
        if t < self.now:
            raise PastEvent(f"run_until({t}) is before now={self.now}")
        if self.horizon is not None:
            t = min(t, self.horizon)
        count = 0
        while True:
            nxt = self.peek_time()
            if nxt is None or nxt > t:
                break
            _, seq = heapq.heappop(self._queue)
            ev = self._pending.pop(seq)
            self.now = ev.fire_at
            self._deliver(ev, self._callbacks.pop(seq, None))
            count += 1
        self.now = max(self.now, t)
        return count

    def write_event_log(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.event_log:
                fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")

    def event_log_bytes(self) -> bytes:
        return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n"
                       for r in self.event_log).encode("utf-8")


def read_event_log(path) -> Iterable[Dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
