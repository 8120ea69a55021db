"""Burst capacity: batch-cluster conversion, image prefetch and cloud bursting."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from .fleet import BatchJob, Cluster, ClusterKind
from .simkernel import MINUTE, SECOND, SeededRng


class QuotaExhausted(RuntimeError):
    def __init__(self, uncovered: int):
        super().__init__(f"cloud quota exhausted, {uncovered} cores uncovered")
        self.uncovered = uncovered


class DrainBlocked(RuntimeError):
    pass


@dataclass(frozen=True)
class SpawnerConfig:
    conversion_rate: float = 12_000.0     # cores per minute
    eviction_delay: int = 0
    prefetch_time: int = 2 * MINUTE
    prefetch_speedup: float = 0.7
    host_cores: int = 48

    def __post_init__(self):
        if self.conversion_rate <= 0:
            raise ValueError("conversion_rate must be positive")
        if not 0 < self.prefetch_speedup <= 1:
            raise ValueError("prefetch_speedup must be in (0, 1]")


# ---------------------------------------------------------------------------
# preheat
# ---------------------------------------------------------------------------

class Preheater:
    """Tracks image prefetch into burst zones.  Starting it twice is a no-op."""

    def __init__(self, cfg: SpawnerConfig):
        self.cfg = cfg
        self.started_at: Optional[int] = None

    def preheat(self, at: int) -> Tuple[int, bool]:
        """Returns (ready_at, newly_started)."""
        if self.started_at is not None:
            return self.ready_at, False
        self.started_at = at
        return self.ready_at, True

    @property
    def ready_at(self) -> Optional[int]:
        return None if self.started_at is None else self.started_at + self.cfg.prefetch_time

    def ready(self, t: int) -> bool:
        return self.started_at is not None and t >= self.ready_at

    def startup_time(self, base_startup: int, t: int) -> int:
        if self.ready(t):
            return prefetched_startup(base_startup, self.cfg.prefetch_speedup)
        return base_startup


def prefetched_startup(base_startup: int, speedup: float) -> int:
    return int(round(base_startup * speedup))


# ---------------------------------------------------------------------------
# batch conversion
# ---------------------------------------------------------------------------

@dataclass
class ConversionPlan:
    cluster_id: str
    needed: int
    start: int
    cfg: SpawnerConfig
    preemptible: int

    @property
    def target(self) -> int:
        return min(self.needed, self.preemptible)

    @property
    def shortfall(self) -> int:
        return max(0, self.needed - self.preemptible)

    def cores_online(self, t: int) -> int:
        """min(needed, preemptible, max(0, t - start - delay) * rate), whole cores."""
        elapsed = max(0, t - self.start - self.cfg.eviction_delay)
        grown = elapsed * self.cfg.conversion_rate / MINUTE
        return int(min(self.target, math.floor(grown + 1e-9)))

    def full_at(self) -> int:
        if self.target <= 0:
            return self.start
        return self.start + self.cfg.eviction_delay + int(math.ceil(self.target * MINUTE / self.cfg.conversion_rate))

    def series(self, tick: int = 10 * SECOND) -> List[Tuple[int, int]]:
        """(time, cores_online) at every tick until full."""
        out = []
        end = self.full_at()
        t = self.start
        while True:
            out.append((t, self.cores_online(t)))
            if t >= end:
                break
            t = min(t + tick, end) if t + tick > end else t + tick
        return out


def convert_batch(cluster: Cluster, needed: int, cfg: SpawnerConfig, start: int = 0) -> ConversionPlan:
    if cluster.kind is not ClusterKind.BATCH:
        raise ValueError(f"cluster {cluster.id} is {cluster.kind.value}, not Batch")
    return ConversionPlan(cluster.id, max(0, int(needed)), start, cfg, cluster.preemptible_cores)


def evict_jobs(cluster: Cluster, cores: int) -> List[BatchJob]:
    """Evict preemptible jobs in id order until ``cores`` are freed; returns evicted jobs."""
    evicted = []
    freed = 0
    keep = []
    for j in cluster.jobs:
        if freed < cores and j.preemptible:
            evicted.append(j)
            freed += j.cores
        else:
            keep.append(j)
    cluster.jobs = keep
    return evicted


@dataclass
class Sufficiency:
    sufficient: bool
    shortfall: int = 0


def estimate_burst_sufficiency(demand: float, preemptible_cores: float, margin: float = 1.1) -> Sufficiency:
    need = round(demand * margin, 6)
    short = max(0, int(math.ceil(need - preemptible_cores)))
    return Sufficiency(short == 0, short)


# ---------------------------------------------------------------------------
# cloud
# ---------------------------------------------------------------------------

@dataclass
class Tranche:
    zone: str
    cores: int
    ready_at: int


@dataclass
class CloudProvider:
    quotas: Dict[str, int]
    latency: int = 10 * MINUTE
    latency_jitter: int = 0            # uniform +/- jitter when nonzero
    provisioned: Dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        for z in self.quotas:
            self.provisioned.setdefault(z, 0)

    def remaining(self, zone: str) -> int:
        return self.quotas[zone] - self.provisioned.get(zone, 0)

    @property
    def total_provisioned(self) -> int:
        return sum(self.provisioned.values())

    @property
    def total_quota(self) -> int:
        return sum(self.quotas.values())


@dataclass
class CloudPlan:
    tranches: List[Tranche]
    uncovered: int = 0

    @property
    def total(self) -> int:
        return sum(t.cores for t in self.tranches)


def cloud_provision(shortfall: int, provider: CloudProvider, at: int = 0,
                    rng: Optional[SeededRng] = None, strict: bool = False) -> CloudPlan:
    """Greedy fill across zones, largest remaining quota first (ties by zone id).

    The uncovered remainder is reported on the plan; with ``strict`` it is
    raised as QuotaExhausted after the covered part has been provisioned.
    """
    if shortfall <= 0:
        raise ValueError("shortfall must be positive")
    left = int(shortfall)
    tranches = []
    for zone in sorted(provider.quotas, key=lambda z: (-provider.remaining(z), z)):
        if left <= 0:
            break
        take = min(left, provider.remaining(zone))
        if take <= 0:
            continue
        lat = provider.latency
        if provider.latency_jitter and rng is not None:
            lat += int(rng.integers(-provider.latency_jitter, provider.latency_jitter + 1))
        provider.provisioned[zone] += take
        tranches.append(Tranche(zone, take, at + max(0, lat)))
        left -= take
    plan = CloudPlan(tranches, left)
    if strict and left > 0:
        raise QuotaExhausted(left)
    return plan


def release_cloud(provider: CloudProvider, serving_on_cloud: Mapping[str, int]) -> int:
    """Destroy every provisioned cloud core; returns cores released.

    ``serving_on_cloud`` maps cloud host id -> serving replica count.
    """
    busy = sorted(h for h, n in serving_on_cloud.items() if n > 0)
    if busy:
        raise DrainBlocked(f"replicas still serving on cloud hosts: {', '.join(busy[:5])}")
    released = provider.total_provisioned
    for z in provider.provisioned:
        provider.provisioned[z] = 0
    return released


BATCH_RESUME_FRACTION = 0.40


def batch_can_resume(freed_cores: float, total_cores: float, fraction: float = BATCH_RESUME_FRACTION) -> bool:
    if total_cores <= 0:
        return True
    return freed_cores / total_cores >= fraction - 1e-12


def resume_batch(cluster: Cluster, freed_cores: float, fraction: float = BATCH_RESUME_FRACTION) -> bool:
    """Revert a burst cluster to Batch once enough capacity is freed.  Returns whether it did."""
    if not batch_can_resume(freed_cores, cluster.batch_cores, fraction):
        return False
    cluster.kind = ClusterKind.BATCH
    return True
