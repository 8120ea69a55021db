"""City routing, isolation policies, workload synthesis and request evaluation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .fleet import (CROSS_TIER_CALLS, DependencyEdge, EdgeKey, FailureClass, Fleet, Semantics, Tier,
                    cross_tier_shares)
from .simkernel import MINUTE, SECOND, SeededRng, Simulator


class CycleDetected(RuntimeError):
    pass


class StabilityCheckFailed(RuntimeError):
    pass


class Mode(str, Enum):
    PEAK = "Peak"
    NON_PEAK = "NonPeak"


@dataclass(frozen=True)
class FailoverScope:
    peak: bool
    full: bool

    @property
    def full_peak(self) -> bool:
        return self.peak and self.full


def detect_mode(tv_failover: float, tv_peak: float, T: float = 0.85) -> Mode:
    if tv_peak <= 0:
        raise ValueError("tv_peak must be positive")
    if not 0 < T <= 1:
        raise ValueError("T must be in (0, 1]")
    return Mode.PEAK if tv_failover >= T * tv_peak else Mode.NON_PEAK


def classify_scope(users_on_trip: float, weekly_peak_users: float,
                   cities_failed: int, total_cities: int) -> FailoverScope:
    if weekly_peak_users <= 0 or total_cities <= 0:
        raise ValueError("totals must be positive")
    return FailoverScope(peak=users_on_trip > 0.85 * weekly_peak_users,
                         full=cities_failed > 0.5 * total_cities)


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------

class RoutingTable:
    """City -> region map; every city is routed to exactly one region."""

    def __init__(self, fleet: Fleet):
        self.regions = fleet.regions
        self.routes: Dict[str, str] = {c.id: c.current_region for c in fleet.cities.values()}
        self.pending: List[Tuple[int, str, str]] = []   # (effective_at, city, region)
        self.version = 0

    def route(self, city: str) -> str:
        return self.routes[city]

    def set_route(self, city: str, region: str) -> None:
        if region not in self.regions:
            raise ValueError(f"unknown region {region!r}")
        if self.routes[city] != region:
            self.routes[city] = region
            self.version += 1

    def cities_in(self, region: str) -> List[str]:
        return sorted(c for c, r in self.routes.items() if r == region)

    def counts(self) -> Dict[str, int]:
        out = {r: 0 for r in self.regions}
        for r in self.routes.values():
            out[r] += 1
        return out


def plan_batches(cities: Sequence[str], fractions: Sequence[float] = (0.05, 0.15, 0.30, 0.50)) -> List[List[str]]:
    """Split ``cities`` into consecutive batches sized by ``fractions``.

    Every batch holds at least one city while cities remain; the last batch
    takes whatever is left.
    """
    cities = list(cities)
    n = len(cities)
    if n == 0:
        return []
    total = sum(fractions)
    out: List[List[str]] = []
    start, acc = 0, 0.0
    for i, f in enumerate(fractions):
        acc += f
        end = n if i == len(fractions) - 1 else max(start + 1, int(round(n * acc / total)))
        end = min(end, n)
        if end > start:
            out.append(cities[start:end])
        start = end
        if start >= n:
            break
    if start < n:
        out[-1].extend(cities[start:])
    return out


class CityMigration:
    """Moves cities to ``target`` batch by batch with stability checks.

    Batch ``k`` is routed at ``start + (k + 1) * interval`` once the health
    probe for the preceding interval reports availability at or above the
    floor.  A failed probe pauses the migration and emits
    ``city_migration_paused``.
    """

    def __init__(self, sim: Simulator, routing: RoutingTable, batches: List[List[str]], target: str,
                 interval: int = 2 * MINUTE, health: Optional[Callable[[int, int], float]] = None,
                 floor: float = 0.0, on_done: Optional[Callable[[], None]] = None, label: str = "failover"):
        self.sim = sim
        self.routing = routing
        self.batches = batches
        self.target = target
        self.interval = interval
        self.health = health
        self.floor = floor
        self.on_done = on_done
        self.label = label
        self.next_batch = 0
        self.paused = False
        self.done = not batches
        self.completed_at: Optional[int] = None
        self.started_at: Optional[int] = None

    def start(self) -> int:
        self.started_at = self.sim.now
        if self.done:
            self.completed_at = self.sim.now
            if self.on_done:
                self.on_done()
            return self.sim.now
        self.sim.schedule_in(self.interval, "city_batch_due", {"batch": 0, "label": self.label},
                             callback=self._due)
        return self.sim.now + self.interval * len(self.batches)

    def _due(self, ev) -> None:
        if self.paused:
            return
        if self.health is not None:
            avail = self.health(self.sim.now - self.interval, self.sim.now)
            if avail < self.floor:
                self.paused = True
                self.sim.emit("city_migration_paused", {"batch": self.next_batch, "availability": avail,
                                                        "label": self.label})
                return
        batch = self.batches[self.next_batch]
        for c in batch:
            self.routing.set_route(c, self.target)
        self.sim.emit("city_batch_moved", {"batch": self.next_batch, "cities": len(batch),
                                           "to": self.target, "label": self.label})
        self.next_batch += 1
        if self.next_batch >= len(self.batches):
            self.done = True
            self.completed_at = self.sim.now
            if self.on_done:
                self.on_done()
        else:
            self.sim.schedule_in(self.interval, "city_batch_due", {"batch": self.next_batch, "label": self.label},
                                 callback=self._due)

    def resume(self) -> None:
        if self.paused and not self.done:
            self.paused = False
            self.sim.schedule_in(self.interval, "city_batch_due", {"batch": self.next_batch, "label": self.label},
                                 callback=self._due)


def move_cities(sim: Simulator, routing: RoutingTable, batch: Sequence[str], to: str,
                interval: int = 2 * MINUTE, health=None, floor: float = 0.0) -> CityMigration:
    """Route one batch of cities to ``to`` after one stability interval."""
    for c in batch:
        if routing.route(c) == to:
            raise ValueError(f"city {c} is already routed to {to}")
    mig = CityMigration(sim, routing, [list(batch)], to, interval, health, floor)
    mig.start()
    return mig


# ---------------------------------------------------------------------------
# isolation
# ---------------------------------------------------------------------------

@dataclass
class IsolationPolicy:
    blocked_classes: frozenset = frozenset({FailureClass.RESTORE_LATER, FailureClass.TERMINATE})
    exemptions: frozenset = frozenset()
    applied_at: int = 0
    convergence: int = 30 * SECOND


@dataclass
class _Ramp:
    start: int
    convergence: int
    rising: bool
    base: float = 0.0    # blocked fraction when this ramp began

    def fraction(self, t: int) -> float:
        if t < self.start:
            return self.base
        if self.convergence <= 0:
            prog = 1.0
        else:
            prog = min(1.0, (t - self.start) / self.convergence)
        target = 1.0 if self.rising else 0.0
        return self.base + (target - self.base) * prog

    def settled_at(self) -> int:
        return self.start + self.convergence


class IsolationController:
    """Per-service blocking with linear convergence ramps."""

    def __init__(self, fleet: Fleet):
        self.fleet = fleet
        self.ramps: Dict[str, _Ramp] = {}
        self.version = 0

    def blocked_fraction(self, service_id: str, t: int) -> float:
        r = self.ramps.get(service_id)
        return 0.0 if r is None else r.fraction(t)

    def apply_isolation(self, policy: IsolationPolicy) -> int:
        for sid in sorted(self.fleet.services):
            svc = self.fleet.services[sid]
            if svc.failure_class not in policy.blocked_classes or sid in policy.exemptions:
                continue
            cur = self.blocked_fraction(sid, policy.applied_at)
            self.ramps[sid] = _Ramp(policy.applied_at, policy.convergence, True, cur)
        self.version += 1
        return policy.applied_at + policy.convergence

    def lift_isolation(self, service_ids: Iterable[str], at: int, convergence: int = 30 * SECOND) -> int:
        for sid in service_ids:
            if sid not in self.ramps:
                continue
            cur = self.blocked_fraction(sid, at)
            self.ramps[sid] = _Ramp(at, convergence, False, cur)
        self.version += 1
        return at + convergence

    def lift_all(self, at: int, convergence: int = 30 * SECOND) -> int:
        return self.lift_isolation(list(self.ramps), at, convergence)

    def in_transition(self, t: int) -> bool:
        return any(r.start <= t < r.settled_at() and r.convergence > 0 for r in self.ramps.values())

    def snapshot(self, t: int) -> Dict[str, float]:
        out = {}
        for sid, r in self.ramps.items():
            f = r.fraction(t)
            if f > 0:
                out[sid] = f
        return out

    def prune(self, t: int) -> None:
        for sid in [s for s, r in self.ramps.items() if not r.rising and t >= r.settled_at()]:
            del self.ramps[sid]


# ---------------------------------------------------------------------------
# request evaluation
# ---------------------------------------------------------------------------

NONE = "none"
BLOCKED_DEPENDENCY_FAILCLOSE = "blocked_dependency_failclose"
CAPACITY = "capacity"
ISOLATION_BLOCKED = "isolation_blocked"
BASE_ERROR = "base_error"


@dataclass
class RequestOutcome:
    root: str
    success: bool
    cause: str = NONE
    failover_tagged: bool = False
    failed_edge: Optional[EdgeKey] = None
    time: int = 0
    city: Optional[str] = None
    region: Optional[str] = None

    def to_json(self) -> dict:
        return {"time": self.time, "city": self.city, "region": self.region, "root": self.root,
                "success": self.success, "cause": self.cause, "failover_tagged": self.failover_tagged,
                "failed_edge": None if self.failed_edge is None else self.failed_edge.label()}


@dataclass
class GraphState:
    """What a request sees: which services are down, which are blocked, and how edges behave.

    ``semantics`` overrides edge behaviour per edge key; edges absent from it
    behave per their ground truth.  Indeterminate behaves as FailClose.
    """
    unavailable: Set[str] = field(default_factory=set)
    blocked: Mapping[str, float] = field(default_factory=dict)
    semantics: Optional[Mapping[EdgeKey, Semantics]] = None
    failover_active: bool = False

    def behaves_failclose(self, edge: DependencyEdge) -> bool:
        sem = edge.ground_truth
        if self.semantics is not None and edge.key in self.semantics:
            sem = self.semantics[edge.key]
        return sem is not Semantics.FAIL_OPEN

    @property
    def deterministic(self) -> bool:
        return all(f in (0.0, 1.0) for f in self.blocked.values())


def _draw_blocked(frac: float, attempts: int, rng) -> bool:
    if frac <= 0.0:
        return False
    if frac >= 1.0:
        return True
    p = frac ** attempts
    if rng is None:
        return p >= 0.5
    return rng.random() < p


def evaluate_request(fleet: Fleet, root: str, state: GraphState, rng=None) -> RequestOutcome:
    """Walk the root's dependency edges depth-first and decide the outcome.

    A callee counts as failed when it is unavailable, blocked by isolation, or
    fails itself through its own fail-close edges.  ``rng`` resolves partial
    blocking; without it a block fraction of 0.5 or more counts as blocked.
    """
    if root not in fleet.services:
        raise KeyError(root)
    svc = fleet.services[root]
    if root in state.unavailable:
        return RequestOutcome(root, False, CAPACITY, failover_tagged=state.failover_active and svc.failure_class.preemptible)
    if _draw_blocked(state.blocked.get(root, 0.0), 1, rng):
        return RequestOutcome(root, False, ISOLATION_BLOCKED, failover_tagged=svc.failure_class.preemptible)

    memo: Dict[str, Optional[EdgeKey]] = {}
    on_path: Set[str] = set()

    def visit(sid: str) -> Tuple[bool, Optional[EdgeKey]]:
        """Returns (failed, edge that made the root-most caller fail)."""
        if sid in memo:
            return memo[sid] is not None, memo[sid]
        if sid in on_path:
            raise CycleDetected(f"dependency cycle through {sid}")
        on_path.add(sid)
        result: Optional[EdgeKey] = None
        for edge in fleet.out_edges(sid):
            callee = edge.callee[0]
            if callee in state.unavailable:
                down = True
            elif _draw_blocked(state.blocked.get(callee, 0.0), edge.attempts, rng):
                down = True
            else:
                down, _ = visit(callee)
            if down and state.behaves_failclose(edge):
                result = edge.key
                break
        on_path.discard(sid)
        memo[sid] = result
        return result is not None, result

    failed, edge = visit(root)
    if failed:
        return RequestOutcome(root, False, BLOCKED_DEPENDENCY_FAILCLOSE, failed_edge=edge)
    return RequestOutcome(root, True)


def check_acyclic(fleet: Fleet) -> None:
    """Raise CycleDetected if the service call graph has a cycle."""
    WHITE, GREY, BLACK = 0, 1, 2
    color = {s: WHITE for s in fleet.services}
    for start in sorted(fleet.services):
        if color[start] != WHITE:
            continue
        stack = [(start, iter(fleet.out_edges(start)))]
        color[start] = GREY
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                color[node] = BLACK
                stack.pop()
                continue
            c = nxt.callee[0]
            if color.get(c) == GREY:
                raise CycleDetected(f"dependency cycle through {c}")
            if color.get(c) == WHITE:
                color[c] = GREY
                stack.append((c, iter(fleet.out_edges(c))))


# ---------------------------------------------------------------------------
# workload synthesis
# ---------------------------------------------------------------------------

@dataclass
class RootRequest:
    time: int
    city: str
    service: str

    def to_json(self) -> dict:
        return {"time": self.time, "city": self.city, "service": self.service}


@dataclass
class Workload:
    trace: list            # list[TraceRecord]
    roots: List[RootRequest]


def generate_workload(fleet: Fleet, seed: int, duration: int, n_records: int = 100_000,
                      n_roots: Optional[int] = None, callee_failure_rate: float = 0.3,
                      flip_noise: float = 0.0, base_error: float = 0.0,
                      root_classes: Optional[Iterable[FailureClass]] = None,
                      edge_sampling: str = "weight") -> Workload:
    """Synthesize a trace of RPC records plus a stream of root requests.

    RPC records are drawn along dependency edges in proportion to edge call
    weight.  Each record's callee fails with ``callee_failure_rate`` (fault
    injection); the caller fails when the edge is truly fail-close, or at the
    ``base_error`` rate, and then has its flag flipped with ``flip_noise``.
    Root requests are spread over cities in proportion to their traffic.
    ``edge_sampling="uniform"`` gives every edge the same call volume, which
    suits classifier evaluation.
    """
    from .depsafety import TraceRecord   # local import: depsafety builds on this module

    rng = SeededRng(seed).child("workload").generator
    edges = list(fleet.edges)
    trace = []
    if edges and n_records > 0:
        if edge_sampling == "uniform":
            w = np.ones(len(edges))
        elif edge_sampling == "weight":
            w = np.array([e.weight for e in edges], dtype=float)
        else:
            raise ValueError(f"unknown edge_sampling {edge_sampling!r}")
        w = w / w.sum()
        idx = rng.choice(len(edges), size=n_records, p=w)
        times = np.sort(rng.integers(0, max(duration, 1), size=n_records))
        callee_failed = rng.random(n_records) < callee_failure_rate
        gt_fc = np.array([e.ground_truth is Semantics.FAIL_CLOSE for e in edges])[idx]
        caller_failed = (callee_failed & gt_fc) | (rng.random(n_records) < base_error)
        flips = rng.random(n_records) < flip_noise
        caller_failed = caller_failed ^ flips
        for i in range(n_records):
            e = edges[idx[i]]
            trace.append(TraceRecord(int(times[i]), e.caller, e.callee,
                                     bool(callee_failed[i]), bool(caller_failed[i])))

    roots: List[RootRequest] = []
    cities = sorted(fleet.cities)
    classes = set(root_classes) if root_classes is not None else {FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE}
    candidates = sorted(s for s, svc in fleet.services.items() if svc.failure_class in classes)
    if n_roots is None:
        n_roots = n_records
    if cities and candidates and n_roots > 0:
        cw = np.array([fleet.cities[c].base_rps for c in cities], dtype=float)
        cw = cw / cw.sum()
        ci = rng.choice(len(cities), size=n_roots, p=cw)
        si = rng.integers(0, len(candidates), size=n_roots)
        rt = np.sort(rng.integers(0, max(duration, 1), size=n_roots))
        roots = [RootRequest(int(rt[i]), cities[ci[i]], candidates[si[i]]) for i in range(n_roots)]
    return Workload(trace, roots)


def tier_call_shares(fleet: Fleet, trace) -> Dict[Tuple[Tier, Tier], float]:
    """Empirical caller-tier -> callee-tier volume shares of a trace."""
    counts: Dict[Tuple[Tier, Tier], int] = {}
    for r in trace:
        key = (fleet.services[r.caller[0]].tier, fleet.services[r.callee[0]].tier)
        counts[key] = counts.get(key, 0) + 1
    total = sum(counts.values()) or 1
    return {k: v / total for k, v in counts.items()}


def reference_shares(fleet: Fleet) -> Dict[Tuple[Tier, Tier], float]:
    """Published cross-tier shares restricted to cells the fleet's edges realize."""
    shares = cross_tier_shares(CROSS_TIER_CALLS)
    present = {(fleet.services[e.caller[0]].tier, fleet.services[e.callee[0]].tier) for e in fleet.edges}
    total = sum(v for k, v in shares.items() if k in present)
    return {k: v / total for k, v in shares.items() if k in present}
