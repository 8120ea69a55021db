"""Two-region fleet model and the seeded synthetic-fleet generator."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np

from .simkernel import DAY, SECOND, HOUR, SeededRng

SCHEMA_VERSION = 1


class InvalidProfile(ValueError):
    pass


class Tier(str, Enum):
    T0 = "T0"
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"
    T4 = "T4"
    T5 = "T5"
    NP = "NP"

    @property
    def priority(self) -> int:
        """Larger is more critical; NP sits below T5."""
        return _TIER_PRIORITY[self]

    def __lt__(self, other):
        if not isinstance(other, Tier):
            return NotImplemented
        return self.priority < other.priority

    def __le__(self, other):
        return self == other or self < other

    def __gt__(self, other):
        if not isinstance(other, Tier):
            return NotImplemented
        return self.priority > other.priority

    def __ge__(self, other):
        return self == other or self > other


_TIER_PRIORITY = {Tier.T0: 6, Tier.T1: 5, Tier.T2: 4, Tier.T3: 3, Tier.T4: 2, Tier.T5: 1, Tier.NP: 0}
TIERS: Tuple[Tier, ...] = (Tier.T0, Tier.T1, Tier.T2, Tier.T3, Tier.T4, Tier.T5, Tier.NP)


class FailureClass(str, Enum):
    ALWAYS_ON = "AlwaysOn"
    ACTIVE_MIGRATE = "ActiveMigrate"
    RESTORE_LATER = "RestoreLater"
    TERMINATE = "Terminate"

    @property
    def rto(self) -> Optional[int]:
        return _RTO[self]

    @property
    def short(self) -> str:
        return _SHORT[self]

    @property
    def preemptible(self) -> bool:
        return self in (FailureClass.RESTORE_LATER, FailureClass.TERMINATE)

    @property
    def critical(self) -> bool:
        return self in (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE)


_RTO = {
    FailureClass.ALWAYS_ON: 1 * SECOND,
    FailureClass.ACTIVE_MIGRATE: 10 * SECOND,
    FailureClass.RESTORE_LATER: 1 * HOUR,
    FailureClass.TERMINATE: None,
}
_SHORT = {FailureClass.ALWAYS_ON: "AO", FailureClass.ACTIVE_MIGRATE: "AM",
          FailureClass.RESTORE_LATER: "RL", FailureClass.TERMINATE: "T"}
CLASSES: Tuple[FailureClass, ...] = tuple(FailureClass)


def default_class_for_tier(t: Tier) -> FailureClass:
    t = Tier(t)
    if t in (Tier.T0, Tier.T1):
        return FailureClass.ALWAYS_ON
    if t is Tier.T2:
        return FailureClass.ACTIVE_MIGRATE
    if t is Tier.NP:
        return FailureClass.TERMINATE
    return FailureClass.RESTORE_LATER


class Semantics(str, Enum):
    FAIL_OPEN = "FailOpen"
    FAIL_CLOSE = "FailClose"
    INDETERMINATE = "Indeterminate"


class EdgeKey(NamedTuple):
    caller: str
    caller_ep: int
    callee: str
    callee_ep: int

    def label(self) -> str:
        return f"{self.caller}:{self.caller_ep}->{self.callee}:{self.callee_ep}"


@dataclass
class DependencyEdge:
    caller: Tuple[str, int]
    callee: Tuple[str, int]
    semantics: Semantics = Semantics.INDETERMINATE
    ground_truth: Semantics = Semantics.FAIL_OPEN
    weight: float = 1.0        # relative call volume
    attempts: int = 1          # calls tried before the caller gives up on the callee

    def __post_init__(self):
        self.caller = (str(self.caller[0]), int(self.caller[1]))
        self.callee = (str(self.callee[0]), int(self.callee[1]))
        self.semantics = Semantics(self.semantics)
        self.ground_truth = Semantics(self.ground_truth)
        if self.caller[0] == self.callee[0]:
            raise ValueError(f"self-edge on service {self.caller[0]!r}")
        if self.attempts < 1:
            raise ValueError("attempts must be >= 1")

    @property
    def key(self) -> EdgeKey:
        return EdgeKey(self.caller[0], self.caller[1], self.callee[0], self.callee[1])

    def to_json(self) -> dict:
        return {"caller": list(self.caller), "callee": list(self.callee),
                "semantics": self.semantics.value, "ground_truth": self.ground_truth.value,
                "weight": self.weight, "attempts": self.attempts}

    @classmethod
    def from_json(cls, d: Mapping) -> "DependencyEdge":
        return cls(tuple(d["caller"]), tuple(d["callee"]), d.get("semantics", "Indeterminate"),
                   d.get("ground_truth", "FailOpen"), float(d.get("weight", 1.0)),
                   int(d.get("attempts", 1)))


@dataclass
class Service:
    id: str
    tier: Tier
    failure_class: FailureClass
    endpoints: int = 1
    cores_per_replica: int = 1
    replicas_per_region: int = 1
    mem_per_core: float = 4.0
    base_startup: int = 90 * SECOND
    load_coefficient: Optional[float] = None   # overrides the scenario's per-class value
    created_at: int = -30 * DAY
    gpu: bool = False
    deny_listed: bool = False

    def __post_init__(self):
        self.tier = Tier(self.tier)
        self.failure_class = FailureClass(self.failure_class)
        if self.cores_per_replica <= 0:
            raise ValueError(f"{self.id}: cores_per_replica must be > 0")
        if self.mem_per_core <= 0:
            raise ValueError(f"{self.id}: mem_per_core must be > 0")
        if self.endpoints < 1:
            raise ValueError(f"{self.id}: endpoints must be >= 1")

    @property
    def total_cores(self) -> int:
        """Baseline cores across both regions."""
        return 2 * self.replicas_per_region * self.cores_per_replica

    def to_json(self) -> dict:
        d = asdict(self)
        d["tier"] = self.tier.value
        d["failure_class"] = self.failure_class.value
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> "Service":
        return cls(**d)


class EnvKind(str, Enum):
    PRODUCTION = "production"
    CANARY = "canary"
    STAGING = "staging"
    SHADOW = "shadow"


class Lifecycle(str, Enum):
    SERVING = "Serving"
    LOCKED = "Locked"
    DISABLED = "Disabled"
    TERMINATED = "Terminated"
    BURSTED = "Bursted"
    RESTORING = "Restoring"


@dataclass
class ServiceEnvironment:
    id: str
    service_id: str
    region: str
    env_kind: EnvKind = EnvKind.PRODUCTION
    required_replicas: int = 1
    # (host id, pool) -> serving replica count
    placement: Dict[Tuple[str, str], int] = field(default_factory=dict)
    lifecycle: Lifecycle = Lifecycle.SERVING
    locked: bool = False

    def __post_init__(self):
        self.env_kind = EnvKind(self.env_kind)
        self.lifecycle = Lifecycle(self.lifecycle)

    @property
    def serving_replicas(self) -> int:
        return sum(self.placement.values())

    def to_json(self) -> dict:
        return {"id": self.id, "service_id": self.service_id, "region": self.region,
                "env_kind": self.env_kind.value, "required_replicas": self.required_replicas,
                "placement": [[h, p, n] for (h, p), n in sorted(self.placement.items())],
                "lifecycle": self.lifecycle.value, "locked": self.locked}

    @classmethod
    def from_json(cls, d: Mapping) -> "ServiceEnvironment":
        placement = {(h, p): int(n) for h, p, n in d.get("placement", [])}
        return cls(d["id"], d["service_id"], d["region"], d.get("env_kind", "production"),
                   int(d.get("required_replicas", 1)), placement,
                   d.get("lifecycle", "Serving"), bool(d.get("locked", False)))


STATELESS = "stateless"
OVERCOMMIT = "overcommit"
POOLS = (STATELESS, OVERCOMMIT)


@dataclass
class Host:
    id: str
    zone: str
    cluster: str
    physical_cores: int
    mem_per_core: float = 8.0
    stateless_pool: int = 0
    overcommit_pool: int = 0
    # (env id, pool) -> [cores, mem]
    allocations: Dict[Tuple[str, str], List[float]] = field(default_factory=dict)

    def __post_init__(self):
        if not self.stateless_pool:
            self.stateless_pool = self.physical_cores

    def pool_capacity(self, pool: str) -> int:
        return self.stateless_pool if pool == STATELESS else self.overcommit_pool

    def allocated(self, pool: str) -> float:
        return sum(v[0] for (e, p), v in self.allocations.items() if p == pool)

    def free(self, pool: str) -> float:
        return self.pool_capacity(pool) - self.allocated(pool)

    def allocated_mem(self) -> float:
        return sum(v[1] for v in self.allocations.values())

    def mem_cap(self, alpha_m: float) -> float:
        return alpha_m * self.physical_cores * self.mem_per_core

    def grant(self, env_id: str, pool: str, cores: float, mem: float) -> None:
        slot = self.allocations.setdefault((env_id, pool), [0.0, 0.0])
        slot[0] += cores
        slot[1] += mem

    def release(self, env_id: str, pool: str, cores: float, mem: float) -> None:
        slot = self.allocations[(env_id, pool)]
        slot[0] -= cores
        slot[1] -= mem
        if slot[0] <= 1e-9:
            del self.allocations[(env_id, pool)]

    def to_json(self) -> dict:
        return {"id": self.id, "zone": self.zone, "cluster": self.cluster,
                "physical_cores": self.physical_cores, "mem_per_core": self.mem_per_core,
                "stateless_pool": self.stateless_pool, "overcommit_pool": self.overcommit_pool,
                "allocations": [[e, p, c, m] for (e, p), (c, m) in sorted(self.allocations.items())]}

    @classmethod
    def from_json(cls, d: Mapping) -> "Host":
        allocs = {(e, p): [float(c), float(m)] for e, p, c, m in d.get("allocations", [])}
        return cls(d["id"], d["zone"], d["cluster"], int(d["physical_cores"]),
                   float(d.get("mem_per_core", 8.0)), int(d.get("stateless_pool", 0)),
                   int(d.get("overcommit_pool", 0)), allocs)


class ClusterKind(str, Enum):
    STEADY = "SteadyState"
    BATCH = "Batch"
    BURST = "Burst"
    CLOUD = "Cloud"


@dataclass
class BatchJob:
    id: str
    cores: int
    preemptible: bool = True
    restart_cost: int = 0


@dataclass
class Cluster:
    id: str
    kind: ClusterKind
    region: str
    zone: str
    hosts: List[str] = field(default_factory=list)
    batch_cores: int = 0
    jobs: List[BatchJob] = field(default_factory=list)

    def __post_init__(self):
        self.kind = ClusterKind(self.kind)

    @property
    def preemptible_cores(self) -> int:
        return sum(j.cores for j in self.jobs if j.preemptible)

    def to_json(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "region": self.region, "zone": self.zone,
                "hosts": list(self.hosts), "batch_cores": self.batch_cores,
                "jobs": [asdict(j) for j in self.jobs]}

    @classmethod
    def from_json(cls, d: Mapping) -> "Cluster":
        return cls(d["id"], d["kind"], d["region"], d["zone"], list(d.get("hosts", [])),
                   int(d.get("batch_cores", 0)), [BatchJob(**j) for j in d.get("jobs", [])])


@dataclass
class Zone:
    id: str
    region: str
    canary: bool = False


@dataclass
class City:
    id: str
    primary_region: str
    current_region: str
    base_rps: float = 100.0
    diurnal_amplitude: float = 0.0   # fraction of base lost at the daily trough
    users_on_trip_per_rps: float = 10.0

    def traffic_at(self, t: int) -> float:
        if not self.diurnal_amplitude:
            return self.base_rps
        phase = (t % DAY) / DAY
        return self.base_rps * (1.0 - self.diurnal_amplitude * 0.5 * (1.0 + math.cos(2 * math.pi * phase)))

    def weekly_peak(self) -> float:
        return self.base_rps


@dataclass
class Fleet:
    regions: Tuple[str, str]
    zones: List[Zone] = field(default_factory=list)
    services: Dict[str, Service] = field(default_factory=dict)
    environments: Dict[str, ServiceEnvironment] = field(default_factory=dict)
    edges: List[DependencyEdge] = field(default_factory=list)
    clusters: Dict[str, Cluster] = field(default_factory=dict)
    hosts: Dict[str, Host] = field(default_factory=dict)
    cities: Dict[str, City] = field(default_factory=dict)

    def __post_init__(self):
        self.regions = tuple(self.regions)
        if len(self.regions) != 2 or self.regions[0] == self.regions[1]:
            raise ValueError("a fleet has exactly two distinct regions")
        self._out: Optional[Dict[str, List[DependencyEdge]]] = None

    # --- lookup helpers ---------------------------------------------------
    def other_region(self, region: str) -> str:
        return self.regions[1] if region == self.regions[0] else self.regions[0]

    def out_edges(self, service_id: str) -> List[DependencyEdge]:
        if self._out is None:
            self.reindex()
        return self._out.get(service_id, [])

    def reindex(self) -> None:
        out: Dict[str, List[DependencyEdge]] = {}
        for e in self.edges:
            out.setdefault(e.caller[0], []).append(e)
        self._out = out

    def add_edge(self, edge: DependencyEdge) -> None:
        self.edges.append(edge)
        self._out = None

    def edge_map(self) -> Dict[EdgeKey, DependencyEdge]:
        return {e.key: e for e in self.edges}

    def envs_of(self, service_id: str) -> List[ServiceEnvironment]:
        return [e for e in self.environments.values() if e.service_id == service_id]

    def env_for(self, service_id: str, region: str) -> Optional[ServiceEnvironment]:
        return self.environments.get(env_id(service_id, region))

    def class_of(self, service_id: str) -> FailureClass:
        return self.services[service_id].failure_class

    def canary_zone(self, region: str) -> Optional[Zone]:
        for z in self.zones:
            if z.region == region and z.canary:
                return z
        return None

    def hosts_in(self, region: str, kinds: Iterable[ClusterKind] = (ClusterKind.STEADY,)) -> List[Host]:
        kinds = set(kinds)
        out = []
        for c in self.clusters.values():
            if c.region == region and c.kind in kinds:
                out.extend(self.hosts[h] for h in c.hosts)
        return out

    def validate(self) -> None:
        ep_count = {s.id: s.endpoints for s in self.services.values()}
        for env in self.environments.values():
            if env.service_id not in self.services:
                raise ValueError(f"environment {env.id} references unknown service {env.service_id}")
            if env.region not in self.regions:
                raise ValueError(f"environment {env.id} in unknown region {env.region}")
            if env.env_kind is not EnvKind.PRODUCTION and \
                    self.services[env.service_id].failure_class is not FailureClass.TERMINATE:
                raise ValueError(f"non-production environment {env.id} must be Terminate class")
        for e in self.edges:
            for svc, ep in (e.caller, e.callee):
                if svc not in ep_count:
                    raise ValueError(f"edge {e.key.label()} references unknown service {svc}")
                if not 0 <= ep < ep_count[svc]:
                    raise ValueError(f"edge {e.key.label()} references unknown endpoint {svc}:{ep}")
        for c in self.cities.values():
            if c.current_region not in self.regions:
                raise ValueError(f"city {c.id} routed to unknown region")

    # --- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "regions": list(self.regions),
            "zones": [asdict(z) for z in self.zones],
            "services": [s.to_json() for s in self.services.values()],
            "environments": [e.to_json() for e in self.environments.values()],
            "edges": [e.to_json() for e in self.edges],
            "clusters": [c.to_json() for c in self.clusters.values()],
            "hosts": [h.to_json() for h in self.hosts.values()],
            "cities": [asdict(c) for c in self.cities.values()],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Fleet":
        version = d.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported fleet schema_version {version!r}")
        fleet = cls(
            regions=tuple(d["regions"]),
            zones=[Zone(**z) for z in d.get("zones", [])],
            services={s["id"]: Service.from_json(s) for s in d.get("services", [])},
            environments={e["id"]: ServiceEnvironment.from_json(e) for e in d.get("environments", [])},
            edges=[DependencyEdge.from_json(e) for e in d.get("edges", [])],
            clusters={c["id"]: Cluster.from_json(c) for c in d.get("clusters", [])},
            hosts={h["id"]: Host.from_json(h) for h in d.get("hosts", [])},
            cities={c["id"]: City(**c) for c in d.get("cities", [])},
        )
        fleet.validate()
        return fleet

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=1)

    @classmethod
    def loads(cls, text: str) -> "Fleet":
        return cls.from_json(json.loads(text))


def env_id(service_id: str, region: str) -> str:
    return f"{service_id}@{region}"


# ---------------------------------------------------------------------------
# Published proportions used as generator inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TierProfile:
    cores: float
    services: int = 1
    endpoints_p50: float = 1.0
    endpoints_p90: float = 1.0
    endpoints_max: int = 1


# baseline cores, #services, endpoints/service p50, p90, max
REFERENCE_PROFILE: Dict[Tier, TierProfile] = {
    Tier.T0: TierProfile(201_000, 96, 7, 79, 153),
    Tier.T1: TierProfile(3_030_000, 607, 10, 96, 1416),
    Tier.T2: TierProfile(400_000, 561, 11, 82, 629),
    Tier.T3: TierProfile(254_000, 1550, 3, 38, 1059),
    Tier.T4: TierProfile(23_100, 283, 2, 22, 116),
    Tier.T5: TierProfile(22_100, 882, 2, 13, 1953),
    Tier.NP: TierProfile(249_000, 18_000, 1, 18, 1594),
}

_B, _T, _M = 1e9, 1e12, 1e6
# weekly cross-tier RPC volume, caller row -> callee column
CROSS_TIER_CALLS: Dict[Tier, Dict[Tier, float]] = {
    Tier.T0: {Tier.T0: 47.1 * _B, Tier.T1: 940 * _B, Tier.T2: 2.30 * _T, Tier.T3: 1.82 * _T,
              Tier.T4: 144 * _B, Tier.T5: 100 * _B, Tier.NP: 1.77 * _T},
    Tier.T1: {Tier.T0: 10.7 * _B, Tier.T1: 21.8 * _T, Tier.T2: 2.24 * _T, Tier.T3: 387 * _B,
              Tier.T4: 6.07 * _B, Tier.T5: 70.4 * _B, Tier.NP: 18.6 * _T},
    Tier.T2: {Tier.T0: 25.3 * _B, Tier.T1: 2.02 * _T, Tier.T2: 663 * _B, Tier.T3: 77.0 * _B,
              Tier.T4: 30.9 * _M, Tier.T5: 1.17 * _B, Tier.NP: 2.70 * _T},
    Tier.T3: {Tier.T0: 7.95 * _B, Tier.T1: 288 * _B, Tier.T2: 119 * _B, Tier.T3: 16.9 * _B,
              Tier.T4: 192 * _M, Tier.T5: 6.09 * _B, Tier.NP: 1.06 * _T},
    Tier.T4: {Tier.T0: 788 * _M, Tier.T1: 11.5 * _B, Tier.T2: 599 * _M, Tier.T3: 228 * _M,
              Tier.T4: 1.19 * _B, Tier.T5: 12.1 * _M, Tier.NP: 22.1 * _B},
    Tier.T5: {Tier.T0: 290 * _M, Tier.T1: 76.1 * _B, Tier.T2: 266 * _M, Tier.T3: 849 * _M,
              Tier.T4: 1.30 * _M, Tier.T5: 4.52 * _B, Tier.NP: 14.1 * _B},
    Tier.NP: {Tier.T0: 107 * _B, Tier.T1: 1.53 * _T, Tier.T2: 471 * _B, Tier.T3: 126 * _B,
              Tier.T4: 12.8 * _B, Tier.T5: 18.3 * _B, Tier.NP: 3.13 * _T},
}


def cross_tier_shares(calls: Mapping[Tier, Mapping[Tier, float]] = CROSS_TIER_CALLS) -> Dict[Tuple[Tier, Tier], float]:
    total = sum(v for row in calls.values() for v in row.values())
    return {(a, b): v / total for a, row in calls.items() for b, v in row.items()}


# fraction of generated edges that are truly fail-close, per category
DEFAULT_FAILCLOSE_FRACTIONS = {
    "AO->RL": 0.10,
    "AM->RL": 0.16,
    "any->T": 0.015,
    "other": 0.30,
}


def inversion_category(caller_cls: FailureClass, callee_cls: FailureClass) -> Optional[str]:
    """Tier-inversion category of a caller/callee class pair, or None."""
    if callee_cls is FailureClass.TERMINATE:
        return "any->T"
    if callee_cls is FailureClass.RESTORE_LATER:
        if caller_cls is FailureClass.ALWAYS_ON:
            return "AO->RL"
        if caller_cls is FailureClass.ACTIVE_MIGRATE:
            return "AM->RL"
    return None


@dataclass
class FleetConfig:
    """Generator knobs.  Distributions here are modeling choices."""
    regions: Tuple[str, str] = ("regionA", "regionB")
    zones_per_region: int = 3
    service_counts: Optional[Dict[str, int]] = None   # per-tier override of service counts
    service_density: float = 1.0                      # multiplies profile service counts × scale
    min_replicas: int = 1
    replica_sizes: Tuple[int, ...] = (1, 2, 4, 8)
    class_overrides: Dict[str, str] = field(default_factory=dict)   # service id -> class
    edges_per_service: float = 3.0
    failclose_fractions: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_FAILCLOSE_FRACTIONS))
    n_cities: int = 50
    city_rps_sigma: float = 0.6
    diurnal_amplitude: float = 0.0
    host_cores: int = 48
    mem_per_host_core: float = 8.0       # M_h
    mem_per_service_core: float = 4.0    # M_s
    stateless_alloc_target: float = 0.9
    overcommit_factor: float = 1.5
    batch_capacity_factor: float = 1.3   # batch cores vs. AM+RL regional demand
    preemptible_fraction: float = 0.8
    batch_job_cores: Tuple[int, ...] = (8, 16, 32)
    base_startup: int = 90 * SECOND
    nonprod_env_kinds: Tuple[str, ...] = ("staging", "shadow")
    pools: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_POOLS))


def _endpoint_draw(rng: np.random.Generator, prof: TierProfile) -> int:
    p50 = max(prof.endpoints_p50, 1.0)
    p90 = max(prof.endpoints_p90, p50)
    sigma = math.log(p90 / p50) / 1.2815515655446004 if p90 > p50 else 0.0
    val = p50 * math.exp(sigma * rng.standard_normal())
    return int(min(max(round(val), 1), max(prof.endpoints_max, 1)))


def _largest_remainder(total: int, weights: np.ndarray, floor_each: int) -> List[int]:
    n = len(weights)
    base = [floor_each] * n
    rest = total - floor_each * n
    if rest <= 0:
        return base
    w = weights / weights.sum()
    raw = w * rest
    ints = np.floor(raw).astype(int)
    short = rest - int(ints.sum())
    order = sorted(range(n), key=lambda i: (-(raw[i] - ints[i]), i))
    for i in order[:short]:
        ints[i] += 1
    return [b + int(x) for b, x in zip(base, ints)]


def _normalize_profile(profile: Mapping) -> Dict[Tier, TierProfile]:
    out: Dict[Tier, TierProfile] = {}
    for k, v in profile.items():
        tier = Tier(k)
        if isinstance(v, TierProfile):
            prof = v
        elif isinstance(v, Mapping):
            prof = TierProfile(**v)
        else:
            prof = TierProfile(float(v), 1, REFERENCE_PROFILE[tier].endpoints_p50,
                               REFERENCE_PROFILE[tier].endpoints_p90, REFERENCE_PROFILE[tier].endpoints_max)
        if prof.cores < 0:
            raise InvalidProfile(f"tier {tier.value} has negative cores")
        out[tier] = prof
    if sum(p.cores for p in out.values()) <= 0:
        raise InvalidProfile("profile has no cores")
    return out


def generate_fleet(seed: int, scale: float = 1.0, profile: Optional[Mapping] = None,
                   config: Optional[FleetConfig] = None) -> Fleet:
    """Build a deterministic synthetic two-region fleet.

    ``profile`` maps tier -> baseline cores (or a :class:`TierProfile`); each
    tier receives ``scale * cores`` split over its services, rounded to whole
    replicas.  Hosts are sized so that stateless-pool grants sit at
    ``stateless_alloc_target`` of physical cores.
    """
    if not 0 < scale <= 1:
        raise ValueError("scale must be in (0, 1]")
    cfg = config or FleetConfig()
    prof = _normalize_profile(profile if profile is not None else REFERENCE_PROFILE)
    root = SeededRng(seed).child("fleet")
    rng = root.generator
    regions = tuple(cfg.regions)
    fleet = Fleet(regions=regions)

    for r in regions:
        for z in range(cfg.zones_per_region):
            fleet.zones.append(Zone(f"{r}-z{z}", r, canary=(z == 0)))

    # --- services ---------------------------------------------------------
    for tier in TIERS:
        if tier not in prof:
            continue
        p = prof[tier]
        per_region = int(round(p.cores * scale / 2.0))
        if per_region <= 0:
            continue
        if cfg.service_counts and tier.value in cfg.service_counts:
            n = int(cfg.service_counts[tier.value])
        else:
            n = max(1, int(round(p.services * scale * cfg.service_density)))
        n = max(1, min(n, per_region // max(cfg.min_replicas, 1)))
        weights = rng.lognormal(0.0, 1.0, size=n)
        cores = _largest_remainder(per_region, weights, cfg.min_replicas)
        for i, c in enumerate(cores):
            sid = f"{tier.value.lower()}-svc{i:04d}"
            pref = int(rng.choice(cfg.replica_sizes))
            cpr = pref
            while cpr > 1 and (c % cpr or c // cpr < cfg.min_replicas):
                cpr //= 2
            fc = FailureClass(cfg.class_overrides.get(sid, default_class_for_tier(tier)))
            fleet.services[sid] = Service(
                id=sid, tier=tier, failure_class=fc, endpoints=_endpoint_draw(rng, p),
                cores_per_replica=cpr, replicas_per_region=c // cpr,
                mem_per_core=cfg.mem_per_service_core, base_startup=cfg.base_startup)

    # --- environments -------------------------------------------------------
    nonprod = list(cfg.nonprod_env_kinds)
    for sid, svc in fleet.services.items():
        kind = EnvKind.PRODUCTION
        if svc.tier is Tier.NP:
            kind = EnvKind(nonprod[int(rng.integers(len(nonprod)))])
        for r in regions:
            fleet.environments[env_id(sid, r)] = ServiceEnvironment(
                env_id(sid, r), sid, r, kind, required_replicas=svc.replicas_per_region)

    _generate_edges(fleet, rng, cfg)
    _generate_cities(fleet, rng, cfg)
    _generate_hosts(fleet, rng, cfg)
    fleet.validate()
    return fleet


def _generate_edges(fleet: Fleet, rng: np.random.Generator, cfg: FleetConfig) -> None:
    ids = sorted(fleet.services)
    if len(ids) < 2:
        return
    # random topological rank keeps the call graph acyclic
    rank = {sid: int(r) for sid, r in zip(ids, rng.permutation(len(ids)))}
    by_tier: Dict[Tier, List[str]] = {}
    for sid in ids:
        by_tier.setdefault(fleet.services[sid].tier, []).append(sid)

    shares = cross_tier_shares()
    cells = [(a, b) for (a, b), v in shares.items() if v > 0 and a in by_tier and b in by_tier]
    if not cells:
        return
    budget = max(len(cells), int(round(cfg.edges_per_service * len(ids))))
    cell_w = np.array([math.sqrt(shares[c]) for c in cells])
    counts = _largest_remainder(budget, cell_w, 1)
    seen = set()
    for (a, b), k in zip(cells, counts):
        made = 0
        for _ in range(k * 4):
            if made >= k:
                break
            caller = by_tier[a][int(rng.integers(len(by_tier[a])))]
            callee = by_tier[b][int(rng.integers(len(by_tier[b])))]
            if caller == callee:
                continue
            if rank[caller] > rank[callee]:
                # only one direction is legal in the DAG; try the reverse pair's slot
                continue
            cs, ce = fleet.services[caller], fleet.services[callee]
            key = (caller, int(rng.integers(cs.endpoints)), callee, int(rng.integers(ce.endpoints)))
            if key in seen:
                continue
            seen.add(key)
            cat = inversion_category(cs.failure_class, ce.failure_class) or "other"
            frac = cfg.failclose_fractions.get(cat, 0.0)
            gt = Semantics.FAIL_CLOSE if rng.random() < frac else Semantics.FAIL_OPEN
            fleet.edges.append(DependencyEdge((key[0], key[1]), (key[2], key[3]),
                                              ground_truth=gt, weight=1.0))
            made += 1
        if made:
            for e in fleet.edges[-made:]:
                e.weight = shares[(a, b)] / made
    fleet.reindex()


def _generate_cities(fleet: Fleet, rng: np.random.Generator, cfg: FleetConfig) -> None:
    rps = rng.lognormal(0.0, cfg.city_rps_sigma, size=cfg.n_cities) * 100.0
    order = np.argsort(-rps, kind="stable")
    # alternate by traffic rank so both regions carry a similar load
    for pos, i in enumerate(order):
        region = fleet.regions[pos % 2]
        cid = f"city{int(i):03d}"
        fleet.cities[cid] = City(cid, region, region, base_rps=float(round(rps[i], 3)),
                                 diurnal_amplitude=cfg.diurnal_amplitude)
    fleet.cities = dict(sorted(fleet.cities.items()))


PHASE1_POLICY = {"AlwaysOn": "dedicated-2x", "ActiveMigrate": "dedicated-2x",
                 "RestoreLater": "overcommit-pool", "Terminate": "overcommit-pool"}
PHASE2_POLICY = {"AlwaysOn": "dedicated-2x", "ActiveMigrate": "dedicated-1x-plus-burst",
                 "RestoreLater": "overcommit-pool", "Terminate": "overcommit-pool"}
LEGACY_POLICY = {c.value: "dedicated-2x" for c in FailureClass}
POLICIES = {"legacy": LEGACY_POLICY, "phase1": PHASE1_POLICY, "phase2": PHASE2_POLICY}


# simulator pool per class: everything preemptible or migratable rides in overcommit
DEFAULT_POOLS = {"AlwaysOn": STATELESS, "ActiveMigrate": OVERCOMMIT,
                 "RestoreLater": OVERCOMMIT, "Terminate": OVERCOMMIT}


def pool_for(pools: Mapping[str, str], fc: FailureClass) -> str:
    return pools.get(fc.value, OVERCOMMIT)


def _generate_hosts(fleet: Fleet, rng: np.random.Generator, cfg: FleetConfig) -> None:
    for r in fleet.regions:
        stateless_cores = 0
        burst_demand = 0
        for env in fleet.environments.values():
            if env.region != r:
                continue
            svc = fleet.services[env.service_id]
            cores = env.required_replicas * svc.cores_per_replica
            if pool_for(cfg.pools, svc.failure_class) == STATELESS:
                stateless_cores += cores
            if svc.failure_class in (FailureClass.ACTIVE_MIGRATE, FailureClass.RESTORE_LATER):
                burst_demand += cores
        physical = stateless_cores / cfg.stateless_alloc_target
        n_hosts = max(1, int(math.ceil(physical / cfg.host_cores)))
        zones = [z for z in fleet.zones if z.region == r]
        for zi, z in enumerate(zones):
            cid = f"{r}-steady-{zi}"
            fleet.clusters[cid] = Cluster(cid, ClusterKind.STEADY, r, z.id)
        oc = int(math.floor((cfg.overcommit_factor - 1.0) * cfg.host_cores + 0.5))
        for h in range(n_hosts):
            z = zones[h % len(zones)]
            cid = f"{r}-steady-{h % len(zones)}"
            hid = f"{r}-h{h:04d}"
            fleet.hosts[hid] = Host(hid, z.id, cid, cfg.host_cores, cfg.mem_per_host_core,
                                    cfg.host_cores, oc)
            fleet.clusters[cid].hosts.append(hid)
        # one batch cluster per region, sized against the burst demand it must absorb
        bcores = int(math.ceil(burst_demand * cfg.batch_capacity_factor / cfg.preemptible_fraction))
        bid = f"{r}-batch-0"
        batch = Cluster(bid, ClusterKind.BATCH, r, zones[-1].id, batch_cores=bcores)
        pre_target = int(round(bcores * cfg.preemptible_fraction))
        filled, j = 0, 0
        while filled < bcores:
            size = int(min(rng.choice(cfg.batch_job_cores), bcores - filled))
            pre = filled < pre_target
            if pre and filled + size > pre_target:
                size = pre_target - filled
            batch.jobs.append(BatchJob(f"{bid}-job{j:04d}", size, preemptible=pre,
                                       restart_cost=int(rng.integers(1, 30)) * 60 * SECOND))
            filled += size
            j += 1
        fleet.clusters[bid] = batch


# ---------------------------------------------------------------------------
# capacity ratio
# ---------------------------------------------------------------------------

def capacity_ratio(fleet_or_cores, policy: Mapping[str, str]) -> float:
    """Provisioned cores divided by steady-state 1x demand cores.

    ``dedicated-2x`` classes are provisioned at twice their demand,
    ``dedicated-1x-plus-burst`` at 1x.  ``overcommit-pool`` classes own no
    dedicated cores: they ride in the idle failover buffer of the 2x classes,
    and only demand that exceeds that buffer needs its own 1x capacity.

    Accepts a :class:`Fleet` or a mapping ``FailureClass -> demand cores``.
    """
    if isinstance(fleet_or_cores, Fleet):
        demand: Dict[FailureClass, float] = {c: 0.0 for c in CLASSES}
        for s in fleet_or_cores.services.values():
            # baseline cores are provisioned at 2x; demand is half of that
            demand[s.failure_class] += s.total_cores / 2.0
    else:
        demand = {FailureClass(k): float(v) for k, v in fleet_or_cores.items()}
    total = sum(demand.values())
    if total <= 0:
        raise ValueError("fleet has no demand")
    dedicated = buffer = overcommit = 0.0
    for fc, d in demand.items():
        kind = policy.get(fc.value, "dedicated-2x")
        if kind == "dedicated-2x":
            dedicated += 2 * d
            buffer += d
        elif kind == "dedicated-1x-plus-burst":
            dedicated += d
        elif kind == "overcommit-pool":
            overcommit += d
        else:
            raise ValueError(f"unknown placement policy {kind!r}")
    spill = max(0.0, overcommit - buffer)
    return (dedicated + spill) / total
