"""Mutable runtime state of one simulation: placements, traffic, isolation and metric streams."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .burst import CloudProvider, Preheater, SpawnerConfig
from .fleet import (CLASSES, DEFAULT_POOLS, OVERCOMMIT, STATELESS, ClusterKind, EnvKind, FailureClass, Fleet,
                    Host, Lifecycle, ServiceEnvironment, pool_for)
from .placement import PlacementRequest, QosConfig, ReplicaLoad, qos_tick, schedule
from .simkernel import MINUTE, SECOND, HOUR, SeededRng, Simulator
from .traffic import GraphState, IsolationController, RequestOutcome, RoutingTable, evaluate_request

CLASS_INDEX = {c: i for i, c in enumerate(CLASSES)}

DEFAULT_LOAD = {"AlwaysOn": 0.24, "ActiveMigrate": 0.38, "RestoreLater": 0.38, "Terminate": 0.38}


@dataclass
class WorldConfig:
    tick: int = 10 * SECOND
    load_coefficients: Dict[str, float] = field(default_factory=lambda: dict(DEFAULT_LOAD))
    requests_per_tick: int = 10
    pools: Dict[str, str] = field(default_factory=lambda: dict(DEFAULT_POOLS))
    populate_overcommit: bool = True
    alpha_m: float = 0.75
    qos: QosConfig = field(default_factory=QosConfig)
    qos_enabled: bool = True
    spawner: SpawnerConfig = field(default_factory=SpawnerConfig)
    cloud_quotas: Dict[str, int] = field(default_factory=dict)
    cloud_latency: int = 10 * MINUTE
    cloud_host_cores: int = 48
    migration_cap: int = 2000
    health_floor: float = 0.999
    city_batches: Tuple[float, ...] = (0.05, 0.15, 0.30, 0.50)
    city_interval: int = 2 * MINUTE
    convergence: int = 30 * SECOND
    safety_margin: float = 1.1
    mode_threshold: float = 0.85
    announce_interval: int = 10 * SECOND
    stabilization: int = 7 * 24 * HOUR


@dataclass
class DowntimeRecord:
    env_id: str
    terminated_at: int
    restored_at: Optional[int] = None
    rto: Optional[int] = None

    @property
    def downtime(self) -> Optional[int]:
        return None if self.restored_at is None else self.restored_at - self.terminated_at

    @property
    def rto_ok(self) -> Optional[bool]:
        if self.rto is None:
            return None
        if self.restored_at is None:
            return False
        return self.downtime <= self.rto


class World:
    """Everything that changes while a scenario runs."""

    def __init__(self, fleet: Fleet, cfg: WorldConfig, seed: int, sim: Optional[Simulator] = None):
        self.fleet = fleet
        self.cfg = cfg
        self.seed = seed
        self.sim = sim or Simulator(quiet=("tick",))
        self.rng = SeededRng(seed)
        self.req_rng = self.rng.child("requests").generator
        self.eval_rng = self.rng.child("evaluation").generator
        self.qos_rng = self.rng.child("qos")
        self.routing = RoutingTable(fleet)
        self.isolation = IsolationController(fleet)
        self.preheater = Preheater(cfg.spawner)
        self.provider = CloudProvider(dict(cfg.cloud_quotas), cfg.cloud_latency)
        self.version = 0
        self.offboarded: Set[str] = set()
        self.ineligible: Set[str] = set()
        self.failover_active = False
        self.pending: Dict[str, Dict[Tuple[str, str], int]] = {}
        self.downtime: Dict[str, DowntimeRecord] = {}
        self.evicted_jobs: Dict[str, list] = {}
        self._moving: Dict[Tuple[str, str], int] = {}
        # environments hosted on capacity outside the model (overcommit pool left empty)
        self.external: Set[str] = set()
        self.host_seq = 0
        # metric streams
        self.outcomes: List[RequestOutcome] = []
        self.util_samples: List[Tuple[int, str, float, float]] = []
        self.cores_by_class: List[dict] = []
        self.burst_ramp: List[Tuple[int, str, int]] = []
        self.evictions: List[Tuple[int, str, str, str]] = []
        self.qos_alarms: List[Tuple[int, str]] = []
        self.tracked_region: Optional[str] = None
        # caches
        self._unavail_cache: Tuple[int, Dict[str, Set[str]]] = (-1, {})
        self._grant_cache: Optional[tuple] = None
        self._outcome_cache: Dict[tuple, RequestOutcome] = {}
        self._outcome_cache_key = None
        self._city_ids = sorted(fleet.cities)
        self._roots = sorted(s for s, svc in fleet.services.items()
                             if any(e.env_kind is EnvKind.PRODUCTION for e in fleet.envs_of(s)))
        self.sim.on("tick", self._on_tick)

    # ------------------------------------------------------------------
    # basic helpers
    # ------------------------------------------------------------------
    def bump(self) -> None:
        self.version += 1

    def svc(self, env: ServiceEnvironment):
        return self.fleet.services[env.service_id]

    def pool_of(self, env: ServiceEnvironment) -> str:
        return pool_for(self.cfg.pools, self.svc(env).failure_class)

    def cluster_kind(self, host_id: str) -> ClusterKind:
        return self.fleet.clusters[self.fleet.hosts[host_id].cluster].kind

    def host_region(self, host_id: str) -> str:
        return self.fleet.clusters[self.fleet.hosts[host_id].cluster].region

    def is_burst_host(self, host_id: str) -> bool:
        return self.fleet.clusters[self.fleet.hosts[host_id].cluster].kind is not ClusterKind.STEADY

    def burst_hosts(self, region: str) -> List[Host]:
        return self.fleet.hosts_in(region, (ClusterKind.BURST, ClusterKind.CLOUD))

    def steady_hosts(self, region: str) -> List[Host]:
        return self.fleet.hosts_in(region, (ClusterKind.STEADY,))

    def eligible(self, service_id: str) -> bool:
        return service_id not in self.ineligible

    def load_coef(self, service_id: str) -> float:
        svc = self.fleet.services[service_id]
        if svc.load_coefficient is not None:
            return svc.load_coefficient
        return self.cfg.load_coefficients.get(svc.failure_class.value, 0.0)

    def _mem(self, env: ServiceEnvironment) -> float:
        svc = self.svc(env)
        return svc.cores_per_replica * svc.mem_per_core

    # ------------------------------------------------------------------
    # placement primitives
    # ------------------------------------------------------------------
    def plan_placement(self, env: ServiceEnvironment, hosts: Sequence[Host], pool: str,
                       replicas: Optional[int] = None, utilization=None) -> Optional[Dict[Tuple[str, str], int]]:
        """All-or-nothing placement of ``replicas`` (default: required) onto ``hosts``; grants on success."""
        svc = self.svc(env)
        n = env.required_replicas if replicas is None else replicas
        if n <= 0:
            return {}
        req = PlacementRequest(env.id, pool, n, svc.cores_per_replica, self._mem(env))
        trial = schedule([req], hosts, self.cfg.alpha_m, utilization, apply=False)
        if trial.unplaced:
            return None
        res = schedule([req], hosts, self.cfg.alpha_m, utilization, apply=True)
        return {(a.host_id, a.pool): a.replicas for a in res.assignments}

    def release(self, env: ServiceEnvironment, placement: Mapping[Tuple[str, str], int]) -> None:
        svc = self.svc(env)
        for (hid, pool), n in placement.items():
            if n > 0 and hid in self.fleet.hosts:
                self.fleet.hosts[hid].release(env.id, pool, n * svc.cores_per_replica, n * self._mem(env))

    def place_steady_state(self) -> Dict[str, int]:
        """Initial placement of every environment onto its region's steady hosts.

        Returns the unplaced replica count per environment.
        """
        unplaced: Dict[str, int] = {}
        for region in self.fleet.regions:
            hosts = self.steady_hosts(region)
            envs = [e for e in self.fleet.environments.values() if e.region == region]
            envs.sort(key=lambda e: (-self.svc(e).cores_per_replica, e.id))
            for pool in (STATELESS, OVERCOMMIT):
                reqs = []
                for e in envs:
                    if self.pool_of(e) != pool:
                        continue
                    if pool == OVERCOMMIT and not self.cfg.populate_overcommit:
                        e.placement = {}
                        self.external.add(e.id)
                        continue
                    svc = self.svc(e)
                    reqs.append(PlacementRequest(e.id, pool, e.required_replicas, svc.cores_per_replica,
                                                 self._mem(e)))
                res = schedule(reqs, hosts, self.cfg.alpha_m, apply=True)
                for a in res.assignments:
                    env = self.fleet.environments[a.env_id]
                    env.placement[(a.host_id, a.pool)] = env.placement.get((a.host_id, a.pool), 0) + a.replicas
                unplaced.update(res.unplaced)
        self.bump()
        return unplaced

    def terminate(self, env: ServiceEnvironment, rto: Optional[int] = None) -> None:
        self.release(env, env.placement)
        env.placement = {}
        pend = self.pending.pop(env.id, None)
        if pend:
            self.release(env, pend)
        env.lifecycle = Lifecycle.TERMINATED
        self.downtime[env.id] = DowntimeRecord(env.id, self.sim.now, None, rto)
        self.bump()

    def add_host(self, cluster_id: str, cores: int, prefix: str) -> Host:
        cl = self.fleet.clusters[cluster_id]
        hid = f"{prefix}-h{self.host_seq:05d}"
        self.host_seq += 1
        host = Host(hid, cl.zone, cluster_id, int(cores), self.fleet_mem_per_core(), int(cores), 0)
        self.fleet.hosts[hid] = host
        cl.hosts.append(hid)
        self._grant_cache = None
        return host

    def fleet_mem_per_core(self) -> float:
        for h in self.fleet.hosts.values():
            return h.mem_per_core
        return 8.0

    def remove_host(self, host_id: str) -> None:
        host = self.fleet.hosts.pop(host_id)
        cl = self.fleet.clusters.get(host.cluster)
        if cl is not None and host_id in cl.hosts:
            cl.hosts.remove(host_id)
        self._grant_cache = None

    # ------------------------------------------------------------------
    # traffic & availability
    # ------------------------------------------------------------------
    def traffic_ratio(self, region: str, t: int) -> float:
        routed = primary = 0.0
        for cid in self._city_ids:
            c = self.fleet.cities[cid]
            v = c.traffic_at(t)
            if self.routing.routes[cid] == region:
                routed += v
            if c.primary_region == region:
                primary += v
        return routed / primary if primary > 0 else 0.0

    def unavailable(self) -> Dict[str, Set[str]]:
        if self._unavail_cache[0] == self.version:
            return self._unavail_cache[1]
        out = {r: set() for r in self.fleet.regions}
        for env in self.fleet.environments.values():
            if env.serving_replicas == 0 and env.id not in self.external:
                out[env.region].add(env.service_id)
        self._unavail_cache = (self.version, out)
        return out

    def graph_state(self, region: str, t: int) -> GraphState:
        return GraphState(unavailable=self.unavailable()[region], blocked=self.isolation.snapshot(t),
                          failover_active=self.failover_active)

    def sample_requests(self, t: int) -> None:
        n = self.cfg.requests_per_tick
        if n <= 0 or not self._roots or not self._city_ids:
            return
        w = np.array([self.fleet.cities[c].traffic_at(t) for c in self._city_ids], dtype=float)
        w = w / w.sum()
        ci = self.req_rng.choice(len(self._city_ids), size=n, p=w)
        ri = self.req_rng.integers(0, len(self._roots), size=n)
        blocked = self.isolation.snapshot(t)
        deterministic = all(f >= 1.0 for f in blocked.values())
        key = (self.version, self.isolation.version, self.failover_active)
        if key != self._outcome_cache_key:
            self._outcome_cache = {}
            self._outcome_cache_key = key
        unavail = self.unavailable()
        for i in range(n):
            city = self._city_ids[int(ci[i])]
            root = self._roots[int(ri[i])]
            region = self.routing.routes[city]
            ck = (region, root)
            base = self._outcome_cache.get(ck) if deterministic else None
            if base is None:
                state = GraphState(unavailable=unavail[region], blocked=blocked,
                                   failover_active=self.failover_active)
                base = evaluate_request(self.fleet, root, state, self.eval_rng)
                if deterministic:
                    self._outcome_cache[ck] = base
            self.outcomes.append(RequestOutcome(root, base.success, base.cause, base.failover_tagged,
                                                base.failed_edge, t, city, region))

    def availability(self, start: int, end: int, classes=(FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE),
                     exclude_tagged: bool = True) -> float:
        ok = total = 0
        for o in reversed(self.outcomes):
            if o.time < start:
                break
            if o.time > end:
                continue
            if self.fleet.services[o.root].failure_class not in classes:
                continue
            if exclude_tagged and o.failover_tagged:
                continue
            total += 1
            ok += o.success
        return ok / total if total else 1.0

    # ------------------------------------------------------------------
    # utilization & QoS
    # ------------------------------------------------------------------
    def _grants(self):
        key = (self.version, len(self.fleet.hosts))
        if self._grant_cache is not None and self._grant_cache[0] == key:
            return self._grant_cache[1]
        host_ids = sorted(self.fleet.hosts)
        index = {h: i for i, h in enumerate(host_ids)}
        grants = np.zeros((len(host_ids), len(CLASSES)))
        coef_grants = np.zeros(len(host_ids))
        physical = np.array([self.fleet.hosts[h].physical_cores for h in host_ids], dtype=float)
        region = np.array([self.host_region(h) for h in host_ids])
        steady = np.array([self.cluster_kind(h) is ClusterKind.STEADY for h in host_ids])
        for env in self.fleet.environments.values():
            svc = self.svc(env)
            coef = self.load_coef(svc.id)
            ci = CLASS_INDEX[svc.failure_class]
            for (hid, _pool), n in env.placement.items():
                i = index.get(hid)
                if i is None:
                    continue
                grants[i, ci] += n * svc.cores_per_replica
                coef_grants[i] += coef * n * svc.cores_per_replica
        data = (host_ids, index, grants, coef_grants, physical, region, steady)
        self._grant_cache = (key, data)
        return data

    def host_utilization(self, t: int) -> Tuple[List[str], np.ndarray, np.ndarray, np.ndarray]:
        host_ids, _, _, coef_grants, physical, region, steady = self._grants()
        ratios = {r: self.traffic_ratio(r, t) for r in self.fleet.regions}
        rvec = np.array([ratios[r] for r in region]) if len(region) else np.zeros(0)
        util = coef_grants * rvec / np.maximum(physical, 1.0)
        return host_ids, util, region, steady

    def record_utilization(self, t: int) -> np.ndarray:
        host_ids, util, region, steady = self.host_utilization(t)
        for r in self.fleet.regions:
            mask = (region == r) & steady
            if mask.any():
                u = util[mask]
                self.util_samples.append((t, r, float(u.mean()), float(np.percentile(u, 99))))
            else:
                self.util_samples.append((t, r, 0.0, 0.0))
        return util

    def run_qos(self, t: int, util: np.ndarray) -> None:
        cfg = self.cfg.qos
        host_ids, index, grants, coef_grants, physical, region, steady = self._grants()
        hot = [int(i) for i in np.nonzero(util > cfg.evict_above)[0]]
        if not hot:
            return
        ratios = {r: self.traffic_ratio(r, t) for r in self.fleet.regions}
        hot_ids = {host_ids[i] for i in hot}
        on_host: Dict[str, List[Tuple[ServiceEnvironment, int]]] = {h: [] for h in hot_ids}
        for eid in sorted(self.fleet.environments):
            env = self.fleet.environments[eid]
            if env.id in self.pending:
                continue    # an orchestrator migration is about to move it anyway
            for (h, _pool), n in env.placement.items():
                if h in hot_ids:
                    on_host[h].append((env, n))
        umap = {h: float(u) for h, u in zip(host_ids, util)}
        for i in hot:
            hid = host_ids[i]
            host = self.fleet.hosts[hid]
            loads = []
            projected = float(util[i])
            for env, n in on_host[hid]:
                svc = self.svc(env)
                cons = self.load_coef(svc.id) * svc.cores_per_replica * ratios[env.region] / host.physical_cores
                moving = self._moving.get((env.id, hid), 0)
                projected -= cons * min(moving, n)
                fc = svc.failure_class
                if env.service_id in self.offboarded and fc.preemptible:
                    fc = FailureClass.ACTIVE_MIGRATE     # protected from eviction, relocated instead
                grant = svc.cores_per_replica / host.physical_cores
                loads.extend([ReplicaLoad(env.id, fc, cons, grant)] * max(0, n - moving))
            if projected <= cfg.evict_above:
                continue    # in-flight moves already cool this host
            out = qos_tick(projected, loads, cfg)
            for act in out.actions:
                if act.kind == "Alarm":
                    self.qos_alarms.append((t, hid))
                    self.sim.emit("qos_alarm", {"host": hid})
                elif act.kind in ("Evict", "Relocate"):
                    self._move_replica(self.fleet.environments[act.env_id], hid, act.kind, umap)
                else:
                    self.sim.emit("qos_throttle", {"host": hid, "env": act.env_id})

    def _move_replica(self, env: ServiceEnvironment, host_id: str, kind: str,
                      umap: Optional[Mapping[str, float]] = None) -> bool:
        """Evict (break-before-make) or relocate (make-before-break) one replica off ``host_id``.

        Targets are hosts in the same region that stay below the cool-down
        threshold with the replica added.  Returns whether a target was found.
        """
        slot = next(((h, p) for (h, p) in env.placement if h == host_id), None)
        if slot is None:
            return False
        pool = slot[1]
        svc = self.svc(env)
        if umap is None:
            host_ids, util, _, _ = self.host_utilization(self.sim.now)
            umap = {h: float(u) for h, u in zip(host_ids, util)}
        per_core = self.load_coef(svc.id) * svc.cores_per_replica * self.traffic_ratio(env.region, self.sim.now)
        limit = self.cfg.qos.cool_below
        candidates = [h for h in self.steady_hosts(env.region) + self.burst_hosts(env.region)
                      if h.id != host_id and umap.get(h.id, 0.0) + per_core / max(h.physical_cores, 1) < limit]
        new = self.plan_placement(env, candidates, pool, replicas=1, utilization=umap) if candidates else None
        self.evictions.append((self.sim.now, host_id, env.id, kind))
        self.sim.emit("qos_" + kind.lower(), {"host": host_id, "env": env.id, "placed": new is not None})
        if kind == "Evict":
            self._drop_one(env, slot)
        if new is None:
            return False   # an evicted replica stays down; a relocating one keeps serving where it is
        for (h, _), n in new.items():
            umap[h] = umap.get(h, 0.0) + n * per_core / max(self.fleet.hosts[h].physical_cores, 1)
        key = (env.id, host_id)
        if kind == "Relocate":
            self._moving[key] = self._moving.get(key, 0) + 1

        def ready(ev, env=env, new=new, slot=slot, kind=kind, key=key):
            if kind == "Relocate":
                self._moving[key] -= 1
                if self._moving[key] <= 0:
                    del self._moving[key]
            # the replica may have been moved by a migration in the meantime
            if kind == "Relocate":
                stale = env.placement.get(slot, 0) <= 0
            else:
                stale = env.serving_replicas >= env.required_replicas
            if env.lifecycle is Lifecycle.TERMINATED or stale:
                self.release(env, new)
                return
            if kind == "Relocate":
                self._drop_one(env, slot)
            for k, n in new.items():
                env.placement[k] = env.placement.get(k, 0) + n
            self.bump()

        self.sim.schedule_in(svc.base_startup, "replica_ready", {"env": env.id}, callback=ready)
        return True

    def _drop_one(self, env: ServiceEnvironment, slot: Tuple[str, str]) -> None:
        self.release(env, {slot: 1})
        env.placement[slot] -= 1
        if env.placement[slot] <= 0:
            del env.placement[slot]
        self.bump()

    # ------------------------------------------------------------------
    # per-class series for the tracked region
    # ------------------------------------------------------------------
    def record_cores_by_class(self, t: int) -> None:
        region = self.tracked_region
        if region is None:
            return
        row = {"time": t, "AO": 0, "AM_steady": 0, "AM_bursted": 0, "RL_steady": 0, "RL_not_bursted": 0,
               "RL_bursted": 0, "T": 0, "T_exempt": 0}
        for env in self.fleet.environments.values():
            if env.region != region:
                continue
            svc = self.svc(env)
            fc = svc.failure_class
            cores = env.required_replicas * svc.cores_per_replica
            steady = bursted = 0
            for (hid, _), n in env.placement.items():
                if self.is_burst_host(hid):
                    bursted += n * svc.cores_per_replica
                else:
                    steady += n * svc.cores_per_replica
            if fc is FailureClass.ALWAYS_ON:
                row["AO"] += steady + bursted
            elif fc is FailureClass.ACTIVE_MIGRATE:
                row["AM_steady"] += steady
                row["AM_bursted"] += bursted
            elif fc is FailureClass.RESTORE_LATER:
                # environments terminated by the failover move from not-bursted to bursted as they restore
                if env.lifecycle in (Lifecycle.TERMINATED, Lifecycle.RESTORING):
                    row["RL_not_bursted"] += cores
                elif env.lifecycle is Lifecycle.BURSTED and env.id in self.downtime:
                    row["RL_bursted"] += cores
                else:
                    row["RL_steady"] += steady + bursted
            elif env.service_id in self.offboarded or env.service_id in self.ineligible:
                row["T_exempt"] += steady + bursted
            else:
                row["T"] += steady + bursted
        self.cores_by_class.append(row)

    # ------------------------------------------------------------------
    # tick
    # ------------------------------------------------------------------
    def _on_tick(self, ev) -> None:
        t = self.sim.now
        util = self.record_utilization(t)
        if self.cfg.qos_enabled:
            self.run_qos(t, util)
        self.sample_requests(t)
        self.record_cores_by_class(t)
        self.isolation.prune(t)
        nxt = t + self.cfg.tick
        if self.sim.horizon is None or nxt <= self.sim.horizon:
            self.sim.schedule(nxt, "tick")

    def start_ticks(self, at: int = 0) -> None:
        self.sim.schedule(at, "tick")
