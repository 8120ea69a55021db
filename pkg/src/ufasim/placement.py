"""Two-pool CPU accounting, overcommit math, best-fit scheduling and QoS eviction."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .fleet import OVERCOMMIT, POOLS, STATELESS, FailureClass, Host


class Unsatisfiable(RuntimeError):
    pass


@dataclass(frozen=True)
class OvercommitParams:
    M_h: float = 8.0
    M_s: float = 4.0
    alpha_m: float = 0.75
    alpha_c: float = 0.9

    def __post_init__(self):
        if min(self.M_h, self.M_s, self.alpha_m, self.alpha_c) <= 0:
            raise ValueError("overcommit parameters must be positive")
        if self.alpha_m > 1 or self.alpha_c > 1:
            raise ValueError("alpha_m and alpha_c must be <= 1")


@dataclass(frozen=True)
class PoolAdvertisement:
    host_id: Optional[str]
    stateless_cores: int
    overcommit_cores: int
    factor: float


@dataclass(frozen=True)
class QosConfig:
    evict_above: float = 0.75
    cool_below: float = 0.70
    eviction_order: Tuple[FailureClass, ...] = (FailureClass.TERMINATE, FailureClass.RESTORE_LATER)

    def __post_init__(self):
        if not self.cool_below < self.evict_above:
            raise ValueError("cool_below must be below evict_above")
        if FailureClass.ALWAYS_ON in self.eviction_order:
            raise ValueError("AlwaysOn replicas are never evicted")


@dataclass(frozen=True)
class PlacementRequest:
    env_id: str
    pool: str
    replicas: int
    cores_per_replica: float
    mem_per_replica: float = 0.0

    def __post_init__(self):
        if self.replicas < 1:
            raise ValueError("replicas must be >= 1")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")


def max_overcommit(p: OvercommitParams) -> float:
    return (p.M_h / p.M_s) * (p.alpha_m / p.alpha_c)


def round_half_up(x: float) -> int:
    # the small epsilon absorbs binary noise such as 0.5000000000000001 below the half
    return int(math.floor(x + 0.5 + 1e-9))


def advertise_pools(physical_cores: int, factor: float, host_id: Optional[str] = None) -> PoolAdvertisement:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return PoolAdvertisement(host_id, int(physical_cores),
                             round_half_up((factor - 1.0) * physical_cores), float(factor))


def apply_advertisement(host: Host, factor: float) -> None:
    adv = advertise_pools(host.physical_cores, factor, host.id)
    host.stateless_pool = adv.stateless_cores
    host.overcommit_pool = adv.overcommit_cores


# ---------------------------------------------------------------------------
# scheduling
# ---------------------------------------------------------------------------

@dataclass
class Assignment:
    env_id: str
    host_id: str
    pool: str
    replicas: int


@dataclass
class ScheduleResult:
    assignments: List[Assignment] = field(default_factory=list)
    unplaced: Dict[str, int] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return not self.unplaced

    def placed_replicas(self) -> int:
        return sum(a.replicas for a in self.assignments)


class _HostView:
    """Mutable free-capacity bookkeeping for one host during a scheduling pass."""
    __slots__ = ("host", "free", "mem_free", "util")

    def __init__(self, host: Host, alpha_m: float, util: float):
        self.host = host
        self.free = {p: host.free(p) for p in POOLS}
        self.mem_free = host.mem_cap(alpha_m) - host.allocated_mem()
        self.util = util


def schedule(requests: Sequence[PlacementRequest], hosts: Sequence[Host], alpha_m: float = 0.75,
             utilization: Optional[Mapping[str, float]] = None, apply: bool = True) -> ScheduleResult:
    """Place every replica best-fit by remaining pool cores.

    Ties go to the host with lower current utilization, then lower host id.
    A request only ever consumes capacity from the pool it names.  With
    ``apply`` the grants are written onto the hosts.
    """
    util = utilization or {}
    views = [_HostView(h, alpha_m, util.get(h.id, 0.0)) for h in sorted(hosts, key=lambda h: h.id)]
    result = ScheduleResult()
    eps = 1e-9
    for req in requests:
        placed_on: Dict[str, int] = {}
        for _ in range(req.replicas):
            best = None
            best_key = None
            for v in views:
                free = v.free[req.pool]
                if free + eps < req.cores_per_replica or v.mem_free + eps < req.mem_per_replica:
                    continue
                key = (free - req.cores_per_replica, v.util, v.host.id)
                if best_key is None or key < best_key:
                    best, best_key = v, key
            if best is None:
                result.unplaced[req.env_id] = result.unplaced.get(req.env_id, 0) + 1
                continue
            best.free[req.pool] -= req.cores_per_replica
            best.mem_free -= req.mem_per_replica
            placed_on[best.host.id] = placed_on.get(best.host.id, 0) + 1
            if apply:
                best.host.grant(req.env_id, req.pool, req.cores_per_replica, req.mem_per_replica)
        for hid in sorted(placed_on):
            result.assignments.append(Assignment(req.env_id, hid, req.pool, placed_on[hid]))
    return result


def exhaustive_feasible(sizes: Sequence[float], capacities: Sequence[float]) -> bool:
    """Brute-force bin-packing feasibility for small instances."""
    sizes = sorted(sizes, reverse=True)
    caps = list(capacities)

    def place(i: int) -> bool:
        if i == len(sizes):
            return True
        tried = set()
        for b in range(len(caps)):
            if caps[b] in tried or caps[b] < sizes[i]:
                continue
            tried.add(caps[b])
            caps[b] -= sizes[i]
            if place(i + 1):
                return True
            caps[b] += sizes[i]
        return False

    return place(0)


def _lower_bound(requests: Sequence[PlacementRequest], hosts: Sequence[Host]) -> float:
    demand = sum(r.replicas * r.cores_per_replica for r in requests if r.pool == OVERCOMMIT)
    cores = sum(h.physical_cores for h in hosts)
    return 1.0 + demand / cores if cores else math.inf


def min_safe_factor(requests: Sequence[PlacementRequest], hosts: Sequence[Host],
                    params: OvercommitParams = OvercommitParams(), target: float = 1.0,
                    granularity: float = 0.01) -> float:
    """Smallest overcommit factor at which ``schedule`` hosts the overcommit workload.

    Factors are tried in ascending ``granularity`` steps from the unit-replica
    volume bound up to :func:`max_overcommit`.  ``hosts`` are templates; their
    existing stateless grants are respected and they are not modified.
    """
    oc_reqs = [r for r in requests if r.pool == OVERCOMMIT]
    total = sum(r.replicas for r in oc_reqs)
    upper = max_overcommit(params)
    lb = max(1.0, _lower_bound(oc_reqs, hosts))
    steps = int(round(1.0 / granularity))
    k = int(math.ceil(round(lb * steps, 9)))
    k_max = int(math.floor(round(upper * steps, 9)))
    if total == 0:
        return 1.0
    while k <= k_max:
        factor = k / steps
        trial = copy.deepcopy(list(hosts))
        for h in trial:
            apply_advertisement(h, factor)
        res = schedule(oc_reqs, trial, params.alpha_m, apply=False)
        if res.placed_replicas() >= target * total - 1e-9:
            return factor
        k += 1
    raise Unsatisfiable(f"workload does not fit even at max overcommit {upper:.4f}")


def volume_lower_bound(requests: Sequence[PlacementRequest], hosts: Sequence[Host]) -> float:
    return _lower_bound(requests, hosts)


# ---------------------------------------------------------------------------
# QoS controller
# ---------------------------------------------------------------------------

EVICT = "Evict"
THROTTLE = "Throttle"
RELOCATE = "Relocate"
ALARM = "Alarm"


@dataclass(frozen=True)
class ReplicaLoad:
    """One replica on a host; consumption and grant are fractions of host cores."""
    env_id: str
    failure_class: FailureClass
    consumption: float
    grant: float = math.inf


@dataclass(frozen=True)
class QosAction:
    kind: str
    env_id: Optional[str] = None
    failure_class: Optional[FailureClass] = None
    relief: float = 0.0   # utilization removed by this action


@dataclass
class QosOutcome:
    actions: List[QosAction]
    projected: float

    @property
    def alarm(self) -> bool:
        return any(a.kind == ALARM for a in self.actions)


def qos_tick(utilization: float, replicas: Iterable[ReplicaLoad], cfg: QosConfig = QosConfig()) -> QosOutcome:
    """Decide evictions for one host measurement.

    Preemptible classes go first, in ``cfg.eviction_order``, largest consumer
    first.  ActiveMigrate replicas are then throttled to their grant and, if
    the host is still hot, relocated.  AlwaysOn replicas are never chosen; if
    the host cannot be cooled an Alarm is emitted.
    """
    if utilization <= cfg.evict_above:
        return QosOutcome([], utilization)
    reps = list(replicas)
    projected = utilization
    actions: List[QosAction] = []

    def order(fc):
        return sorted((r for r in reps if r.failure_class is fc), key=lambda r: (-r.consumption, r.env_id))

    for fc in cfg.eviction_order:
        for r in order(fc):
            if projected < cfg.cool_below:
                break
            actions.append(QosAction(EVICT, r.env_id, fc, r.consumption))
            projected -= r.consumption
    if projected >= cfg.cool_below:
        for r in order(FailureClass.ACTIVE_MIGRATE):
            if projected < cfg.cool_below:
                break
            remaining = r.consumption
            excess = r.consumption - r.grant
            if excess > 0:
                actions.append(QosAction(THROTTLE, r.env_id, r.failure_class, excess))
                projected -= excess
                remaining = r.grant
            if projected >= cfg.cool_below and remaining > 0:
                actions.append(QosAction(RELOCATE, r.env_id, r.failure_class, remaining))
                projected -= remaining
    if projected >= cfg.cool_below:
        actions.append(QosAction(ALARM))
    return QosOutcome(actions, projected)
