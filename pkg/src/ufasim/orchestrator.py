"""Failover/failback state machines, environment migration and drills."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Set, Tuple

from .burst import (ConversionPlan, Sufficiency, cloud_provision, convert_batch, estimate_burst_sufficiency,
                    evict_jobs, release_cloud, resume_batch, batch_can_resume)
from .fleet import (OVERCOMMIT, STATELESS, Cluster, ClusterKind, EnvKind, FailureClass, Fleet, Host, Lifecycle,
                    ServiceEnvironment, Tier)
from .simkernel import DAY, HOUR, MINUTE, SECOND, SeededRng
from .traffic import (CityMigration, GraphState, IsolationPolicy, Mode, detect_mode, evaluate_request,
                      plan_batches)
from .world import World


class AlreadyInProgress(RuntimeError):
    pass


class BurstUnsatisfiable(RuntimeError):
    pass


class NotFailedOver(RuntimeError):
    pass


class CapacityUnavailable(RuntimeError):
    pass


class Phase(str, Enum):
    STEADY = "Steady"
    LOCKED = "Locked"
    PREHEATING = "Preheating"
    EVICTING = "Evicting"
    CONVERTING = "Converting"
    MIGRATING = "Migrating"
    RESTORING = "Restoring"
    FAILED_OVER = "FailedOver"
    FAILING_BACK = "FailingBack"
    UNLOCKING = "Unlocking"


PHASE_ORDER = list(Phase)


class MigrationStrategy(str, Enum):
    BBM = "BBM"
    MBB = "MBB"


def strategy_for(fc: FailureClass) -> MigrationStrategy:
    return MigrationStrategy.BBM if fc is FailureClass.RESTORE_LATER else MigrationStrategy.MBB


@dataclass
class OrchestratorState:
    phase: Phase = Phase.STEADY
    mode: Optional[Mode] = None
    transitions: List[Tuple[str, int]] = field(default_factory=list)
    locks: Set[str] = field(default_factory=set)
    source: Optional[str] = None
    target: Optional[str] = None

    @property
    def phase_entered_at(self) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for p, t in self.transitions:
            out[p] = t
        return out


# ---------------------------------------------------------------------------
# migration machinery
# ---------------------------------------------------------------------------

@dataclass
class MigrationJob:
    env_id: str
    strategy: MigrationStrategy
    hosts: Callable[[], List[Host]]
    pool: str
    on_done: Optional[Callable[["MigrationJob"], None]] = None
    lifecycle_after: Lifecycle = Lifecycle.BURSTED
    started_at: Optional[int] = None
    done_at: Optional[int] = None


def startup_delay(world: World, env: ServiceEnvironment, hosts: Sequence[Host]) -> int:
    svc = world.svc(env)
    on_burst = any(world.is_burst_host(h.id) for h in hosts)
    if on_burst:
        return world.preheater.startup_time(svc.base_startup, world.sim.now)
    return svc.base_startup


def migrate_environment(world: World, job: MigrationJob) -> int:
    """Start one migration.  Returns the completion time.

    MBB schedules the new replicas while the old ones keep serving and flips
    once they have started.  BBM expects the environment to be terminated
    already and restores it.  Raises CapacityUnavailable when the destination
    cannot take every replica.
    """
    env = world.fleet.environments[job.env_id]
    if job.strategy is MigrationStrategy.BBM and env.serving_replicas > 0:
        raise ValueError(f"BBM migration of {env.id} needs a terminated environment")
    hosts = job.hosts()
    new = world.plan_placement(env, hosts, job.pool)
    if new is None:
        raise CapacityUnavailable(env.id)
    used_hosts = [world.fleet.hosts[h] for h, _ in new]
    delay = startup_delay(world, env, used_hosts)
    job.started_at = world.sim.now
    world.pending[env.id] = new
    if job.strategy is MigrationStrategy.BBM:
        env.lifecycle = Lifecycle.RESTORING
        world.bump()

    def finish(ev, env=env, new=new, job=job):
        world.pending.pop(env.id, None)
        if job.strategy is MigrationStrategy.MBB:
            world.release(env, env.placement)
        env.placement = dict(new)
        env.lifecycle = job.lifecycle_after
        rec = world.downtime.get(env.id)
        if rec is not None and rec.restored_at is None and job.strategy is MigrationStrategy.BBM:
            rec.restored_at = world.sim.now
        job.done_at = world.sim.now
        world.bump()
        if job.on_done:
            job.on_done(job)

    world.sim.schedule_in(delay, "migration_complete",
                          {"env": env.id, "strategy": job.strategy.value}, callback=finish)
    return world.sim.now + delay


class MigrationPool:
    """Slot-limited set of outstanding migrations; queued jobs start as slots and capacity free up."""

    def __init__(self, world: World, cap: int = 2000):
        self.world = world
        self.cap = cap
        self.queue: List[MigrationJob] = []
        self.in_flight: Dict[str, MigrationJob] = {}
        self.done: List[MigrationJob] = []

    def submit(self, jobs: Sequence[MigrationJob]) -> None:
        self.queue.extend(jobs)

    @property
    def idle(self) -> bool:
        return not self.queue and not self.in_flight

    def pump(self) -> int:
        started = 0
        keep = []
        for job in self.queue:
            if len(self.in_flight) >= self.cap:
                keep.append(job)
                continue
            orig = job.on_done

            def done(j, orig=orig):
                self.in_flight.pop(j.env_id, None)
                self.done.append(j)
                if orig:
                    orig(j)
                self.pump()

            job.on_done = done
            try:
                migrate_environment(self.world, job)
            except CapacityUnavailable:
                job.on_done = orig
                keep.append(job)
                continue
            self.in_flight[job.env_id] = job
            started += 1
        self.queue = keep
        return started


# ---------------------------------------------------------------------------
# eligibility
# ---------------------------------------------------------------------------

@dataclass
class EligibilityDelta:
    onboarded: List[str]
    excluded: Dict[str, str]


def reconcile_eligibility(fleet: Fleet, now: int, offboarded: Set[str] = frozenset(),
                          stabilization: int = 7 * DAY, previous: Optional[Set[str]] = None) -> EligibilityDelta:
    """Decide which services take part in failover actions.

    Special-hardware and deny-listed services are excluded, new services wait
    out the stabilization period, and off-boarded services are kept out of
    termination.
    """
    excluded: Dict[str, str] = {}
    onboard: List[str] = []
    for sid in sorted(fleet.services):
        svc = fleet.services[sid]
        if svc.gpu:
            excluded[sid] = "special_hardware"
        elif svc.deny_listed:
            excluded[sid] = "deny_listed"
        elif now - svc.created_at < stabilization:
            excluded[sid] = "stabilizing"
        elif sid in offboarded:
            excluded[sid] = "offboarded"
        elif previous is None or sid not in previous:
            onboard.append(sid)
    return EligibilityDelta(onboard, excluded)


# ---------------------------------------------------------------------------
# orchestrator
# ---------------------------------------------------------------------------

class Orchestrator:
    def __init__(self, world: World, health_probe: Optional[Callable[[int, int], float]] = None):
        self.world = world
        self.state = OrchestratorState()
        self.pool = MigrationPool(world, world.cfg.migration_cap)
        self.conversions: Dict[str, ConversionPlan] = {}
        self.cloud_zones: List[str] = []
        self.city_migration: Optional[CityMigration] = None
        self.report: Dict[str, object] = {}
        self.health_probe = health_probe or (lambda a, b: world.availability(a, b))
        self._announced: Dict[str, int] = {}
        self._burst_clusters: List[str] = []
        self._resumed: Set[str] = set()
        self._cloud_released = True
        self._back_submitted = True
        self._exempt: Set[str] = set()
        self.errors: List[str] = []

    # -- bookkeeping -----------------------------------------------------
    def _enter(self, phase: Phase) -> None:
        self.state.phase = phase
        self.state.transitions.append((phase.value, self.world.sim.now))
        self.world.sim.emit("phase", {"phase": phase.value})

    def _exempt_services(self) -> Set[str]:
        w = self.world
        return set(w.offboarded) | set(w.ineligible)

    def _demand(self, region: str) -> int:
        w = self.world
        total = 0
        for env in w.fleet.environments.values():
            if env.region != region or env.service_id in w.ineligible:
                continue
            svc = w.svc(env)
            if svc.failure_class in (FailureClass.ACTIVE_MIGRATE, FailureClass.RESTORE_LATER) or \
                    (svc.failure_class.preemptible and svc.id in w.offboarded):
                total += env.required_replicas * svc.cores_per_replica
        return total

    def tv(self, t: int) -> float:
        return sum(c.traffic_at(t) for c in self.world.fleet.cities.values())

    def tv_peak(self) -> float:
        return sum(c.weekly_peak() for c in self.world.fleet.cities.values())

    # -- failover ----------------------------------------------------------
    def initiate_failover(self, source: str, target: str, traffic_level: float = 1.0) -> Mode:
        w = self.world
        if self.state.phase is not Phase.STEADY:
            raise AlreadyInProgress(f"orchestrator is in phase {self.state.phase.value}")
        if {source, target} != set(w.fleet.regions):
            raise ValueError("failover needs the two fleet regions")
        now = w.sim.now
        mode = detect_mode(self.tv(now) * traffic_level, self.tv_peak(), w.cfg.mode_threshold)
        self.state.mode = mode
        self.state.source, self.state.target = source, target
        self.state.transitions = [(Phase.STEADY.value, now)]
        w.tracked_region = target
        w.sim.emit("failover_initiated", {"from": source, "to": target, "mode": mode.value})
        if mode is Mode.NON_PEAK:
            self._enter(Phase.MIGRATING)
            self._start_city_moves(source, target, self._maybe_failed_over)
            return mode
        self._peak_failover(source, target)
        return mode

    def _peak_failover(self, source: str, target: str) -> None:
        w = self.world
        fleet = w.fleet
        exempt = self._exempt_services()
        # (1) lock everything that is not AlwaysOn
        self._enter(Phase.LOCKED)
        for env in sorted(fleet.environments.values(), key=lambda e: e.id):
            if w.svc(env).failure_class is not FailureClass.ALWAYS_ON:
                env.locked = True
                self.state.locks.add(env.id)
        # capacity precondition before anything destructive
        demand = self._demand(target)
        batches = [c for c in sorted(fleet.clusters.values(), key=lambda c: c.id)
                   if c.region == target and c.kind is ClusterKind.BATCH]
        preemptible = sum(c.preemptible_cores for c in batches)
        if preemptible + w.provider.total_quota - w.provider.total_provisioned < demand:
            self.report["burst_unsatisfiable"] = {"demand": demand, "preemptible": preemptible,
                                                  "cloud_quota": w.provider.total_quota}
            self._unlock()
            self._enter(Phase.STEADY)
            w.sim.emit("failover_aborted", {"reason": "BurstUnsatisfiable", "demand": demand})
            raise BurstUnsatisfiable(f"burst {preemptible} + cloud {w.provider.total_quota} < demand {demand}")
        # (2) preheat
        self._enter(Phase.PREHEATING)
        ready_at, fresh = w.preheater.preheat(w.sim.now)
        if fresh:
            w.sim.schedule(ready_at, "preheat_ready", {"region": target})
        w.failover_active = True
        # (4) terminate RL and T in steady clusters, isolate, tag
        self._enter(Phase.EVICTING)
        w.sim.emit("batch_evict_signal", {"clusters": [c.id for c in batches]})
        terminated = []
        for env in sorted(fleet.environments.values(), key=lambda e: e.id):
            svc = w.svc(env)
            if env.region != target or not svc.failure_class.preemptible or svc.id in exempt:
                continue
            w.terminate(env, rto=svc.failure_class.rto)
            terminated.append(env.id)
        w.isolation.apply_isolation(IsolationPolicy(exemptions=frozenset(exempt), applied_at=w.sim.now,
                                                    convergence=w.cfg.convergence))
        w.sim.emit("terminated", {"count": len(terminated)})
        # (3) burst capacity
        self._enter(Phase.CONVERTING)
        suff = estimate_burst_sufficiency(demand, preemptible, w.cfg.safety_margin)
        self.report["burst_estimate"] = {"demand": demand, "preemptible": preemptible,
                                         "sufficient": suff.sufficient, "shortfall": suff.shortfall}
        remaining = demand
        for c in batches:
            need = min(remaining, c.preemptible_cores)
            if need <= 0:
                continue
            remaining -= need
            plan = convert_batch(c, need, w.cfg.spawner, w.sim.now)
            c.kind = ClusterKind.BURST
            self.conversions[c.id] = plan
            self._burst_clusters.append(c.id)
            self._announced[c.id] = 0
            w.evicted_jobs.setdefault(c.id, [])
            w.sim.schedule(w.sim.now, "burst_announce", {"cluster": c.id}, callback=self._announce)
        if not suff.sufficient:
            plan = cloud_provision(suff.shortfall, w.provider, w.sim.now, w.rng.child("cloud").generator)
            self.report["cloud"] = {"requested": suff.shortfall, "provisioned": plan.total,
                                    "uncovered": plan.uncovered}
            if plan.uncovered:
                w.sim.emit("quota_exhausted", {"uncovered": plan.uncovered})
            self._cloud_released = False
            for tr in plan.tranches:
                w.sim.schedule(tr.ready_at, "cloud_ready", {"zone": tr.zone, "cores": tr.cores},
                               callback=self._cloud_ready)
        # (5) MBB for ActiveMigrate and off-boarded preemptible envs, (6) BBM restore for RL
        self._enter(Phase.MIGRATING)
        mbb, bbm = [], []
        for env in fleet.environments.values():
            svc = w.svc(env)
            if env.region != target or svc.id in w.ineligible:
                continue
            if svc.failure_class is FailureClass.ACTIVE_MIGRATE or \
                    (svc.failure_class.preemptible and svc.id in w.offboarded):
                mbb.append(env)
            elif svc.failure_class is FailureClass.RESTORE_LATER:
                bbm.append(env)
        order = lambda e: (-w.svc(e).tier.priority, e.id)
        burst = lambda: w.burst_hosts(target)
        self.pool.submit([MigrationJob(e.id, MigrationStrategy.MBB, burst, STATELESS,
                                       self._migration_done) for e in sorted(mbb, key=order)])
        self.pool.submit([MigrationJob(e.id, MigrationStrategy.BBM, burst, STATELESS,
                                       self._restore_done) for e in sorted(bbm, key=order)])
        self._enter(Phase.RESTORING)
        # (7) cities, interleaved with migration
        self._start_city_moves(source, target, self._maybe_failed_over)
        self.pool.pump()
        self._maybe_failed_over()

    def _start_city_moves(self, source: str, target: str, on_done) -> None:
        w = self.world
        cities = [c for c in w.routing.cities_in(source)]
        cities.sort(key=lambda c: (-w.fleet.cities[c].base_rps, c))
        cities.reverse()   # smallest cities move first
        batches = plan_batches(cities, w.cfg.city_batches)
        self.city_migration = CityMigration(w.sim, w.routing, batches, target, w.cfg.city_interval,
                                            self.health_probe, w.cfg.health_floor, on_done=on_done,
                                            label=self.state.phase.value)
        self.city_migration.start()

    def _announce(self, ev) -> None:
        w = self.world
        cid = ev.payload["cluster"]
        plan = self.conversions[cid]
        cluster = w.fleet.clusters[cid]
        online = plan.cores_online(w.sim.now)
        prev = self._announced[cid]
        host_cores = w.cfg.spawner.host_cores
        full = online >= plan.target
        # hosts come online whole; the last one may be partial
        have = prev
        while online - have >= host_cores or (full and online > have):
            size = min(host_cores, online - have)
            w.evicted_jobs[cid].extend(evict_jobs(cluster, size))
            w.add_host(cid, size, cid)
            have += size
        if have != prev:
            self._announced[cid] = have
            w.burst_ramp.append((w.sim.now, cid, have))
            w.sim.emit("capacity_announced", {"cluster": cid, "cores_online": have})
            self.pool.pump()
            self._maybe_failed_over()
        elif not w.burst_ramp or w.burst_ramp[-1][1] != cid or w.burst_ramp[-1][0] != w.sim.now:
            w.burst_ramp.append((w.sim.now, cid, have))
        if not full:
            w.sim.schedule_in(w.cfg.announce_interval, "burst_announce", {"cluster": cid}, callback=self._announce)

    def _cloud_ready(self, ev) -> None:
        w = self.world
        zone, cores = ev.payload["zone"], ev.payload["cores"]
        target = self.state.target
        cid = f"{target}-cloud-{zone}"
        if cid not in w.fleet.clusters:
            zones = [z for z in w.fleet.zones if z.region == target]
            w.fleet.clusters[cid] = Cluster(cid, ClusterKind.CLOUD, target, zones[0].id)
            self.cloud_zones.append(cid)
        left = cores
        while left > 0:
            size = min(w.cfg.cloud_host_cores, left)
            w.add_host(cid, size, cid)
            left -= size
        w.burst_ramp.append((w.sim.now, cid, cores))
        w.sim.emit("capacity_announced", {"cluster": cid, "cores_online": cores})
        self.pool.pump()
        self._maybe_failed_over()

    def _migration_done(self, job: MigrationJob) -> None:
        self._maybe_failed_over()

    def _restore_done(self, job: MigrationJob) -> None:
        w = self.world
        env = w.fleet.environments[job.env_id]
        w.isolation.lift_isolation([env.service_id], w.sim.now, w.cfg.convergence)
        rec = w.downtime.get(env.id)
        payload = {"env": env.id}
        if rec is not None:
            payload["downtime_ms"] = rec.downtime
            if rec.rto_ok is False:
                w.sim.emit("rto_violated", payload)
        w.sim.emit("restored", payload)
        self._maybe_failed_over()

    def _maybe_failed_over(self) -> None:
        if self.state.phase not in (Phase.MIGRATING, Phase.RESTORING):
            return
        if not self.pool.idle:
            return
        if self.city_migration is None or not self.city_migration.done:
            return
        self._enter(Phase.FAILED_OVER)

    # -- failback ------------------------------------------------------------
    def initiate_failback(self) -> None:
        w = self.world
        if self.state.phase is not Phase.FAILED_OVER:
            raise NotFailedOver(f"orchestrator is in phase {self.state.phase.value}")
        source, target = self.state.source, self.state.target
        self._enter(Phase.FAILING_BACK)
        w.sim.emit("failback_initiated", {"to": source})
        if self.state.mode is Mode.NON_PEAK:
            self._start_city_moves(target, source, self._maybe_steady)
            return
        w.isolation.lift_all(w.sim.now, w.cfg.convergence)
        self._back_submitted = False
        # traffic returns first so the surviving region cools before replicas come back to its steady pools
        self._start_city_moves(target, source, self._failback_cities_done)

    def _failback_cities_done(self) -> None:
        w = self.world
        target = self.state.target
        steady = lambda: w.steady_hosts(target)
        back, restart = [], []
        for env in w.fleet.environments.values():
            if env.region != target:
                continue
            on_burst = any(w.is_burst_host(h) for h, _ in env.placement)
            if on_burst:
                back.append(env)
            elif env.lifecycle is Lifecycle.TERMINATED:
                restart.append(env)
        order = lambda e: (-w.svc(e).tier.priority, e.id)
        self.pool.submit([MigrationJob(e.id, MigrationStrategy.MBB, steady, w.pool_of(e), self._back_done,
                                       Lifecycle.SERVING) for e in sorted(back, key=order)])
        self.pool.submit([MigrationJob(e.id, MigrationStrategy.BBM, steady, w.pool_of(e), self._back_done,
                                       Lifecycle.SERVING) for e in sorted(restart, key=order)])
        self._back_submitted = True
        self.pool.pump()
        self._drain()

    def _back_done(self, job: MigrationJob) -> None:
        self._drain()

    def _drain(self) -> None:
        """Dissolve empty burst and cloud hosts, resume batch, release cloud."""
        w = self.world
        target = self.state.target
        for cid in list(self._burst_clusters) + list(self.cloud_zones):
            cl = w.fleet.clusters.get(cid)
            if cl is None:
                continue
            for hid in list(cl.hosts):
                host = w.fleet.hosts[hid]
                if not host.allocations:
                    w.remove_host(hid)
        for cid in list(self._burst_clusters):
            cl = w.fleet.clusters[cid]
            if cid in self._resumed:
                continue
            held = sum(w.fleet.hosts[h].physical_cores for h in cl.hosts)
            freed = cl.batch_cores - held
            if resume_batch(cl, freed):
                self._resumed.add(cid)
                cl.jobs.extend(w.evicted_jobs.get(cid, []))
                cl.jobs.sort(key=lambda j: j.id)
                w.evicted_jobs[cid] = []
                w.sim.emit("batch_resumed", {"cluster": cid, "freed": freed})
        if not self._cloud_released:
            busy = {h: 1 for cid in self.cloud_zones for h in w.fleet.clusters[cid].hosts}
            if not busy:
                released = release_cloud(w.provider, {})
                for cid in self.cloud_zones:
                    del w.fleet.clusters[cid]
                self.cloud_zones = []
                self._cloud_released = True
                w.sim.emit("cloud_released", {"cores": released})
        self._maybe_steady()

    def _maybe_steady(self) -> None:
        w = self.world
        if self.state.phase is not Phase.FAILING_BACK:
            return
        if not self.pool.idle or self.city_migration is None or not self.city_migration.done:
            return
        if self.state.mode is Mode.PEAK:
            if not self._back_submitted or not self._cloud_released:
                return
            if any(c not in self._resumed for c in self._burst_clusters):
                return
            for cid in self._burst_clusters:
                if any(w.fleet.hosts[h].allocations for h in w.fleet.clusters[cid].hosts):
                    return
            for cid in self._burst_clusters:
                for hid in list(w.fleet.clusters[cid].hosts):
                    w.remove_host(hid)
        self._enter(Phase.UNLOCKING)
        self._unlock()
        w.failover_active = False
        self._burst_clusters = []
        self._resumed = set()
        self._enter(Phase.STEADY)

    def _unlock(self) -> None:
        w = self.world
        for eid in sorted(self.state.locks):
            w.fleet.environments[eid].locked = False
        self.state.locks = set()


# ---------------------------------------------------------------------------
# drills
# ---------------------------------------------------------------------------

class DrillKind(str, Enum):
    BLACKHOLE = "Blackhole"
    FAILOVER_CERTIFICATION = "FailoverCertification"


@dataclass
class DrillSpec:
    kind: DrillKind
    targets: Optional[List[str]] = None     # services, or None for every RL/T service
    ramp: List[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    peak_condition: bool = True
    source: Optional[str] = None
    failover_at: int = 1 * HOUR
    failback_at: int = 3 * HOUR
    samples_per_service: int = 200
    floor: float = 0.999

    def __post_init__(self):
        self.kind = DrillKind(self.kind)
        if self.kind is DrillKind.BLACKHOLE:
            if not self.ramp or self.ramp[0] != 0.0 or self.ramp[-1] != 1.0:
                raise ValueError("blackhole ramp must start at 0 and end at 1.0")
            if any(b < a for a, b in zip(self.ramp, self.ramp[1:])):
                raise ValueError("blackhole ramp must be non-decreasing")


@dataclass
class DrillStep:
    fraction: float
    availability: float
    min_service_availability: float
    failing_services: List[str]
    implicated_edges: List[str]


@dataclass
class BlackholeReport:
    certified: bool
    steps: List[DrillStep]
    first_failing_step: Optional[float]
    implicated_edges: List[str]

    def to_json(self) -> dict:
        return {"certified": self.certified, "first_failing_step": self.first_failing_step,
                "implicated_edges": self.implicated_edges,
                "steps": [s.__dict__ for s in self.steps]}


def run_blackhole_drill(fleet: Fleet, spec: DrillSpec, seed: int = 0, exempt: Sequence[str] = ()) -> BlackholeReport:
    """Block traffic into the target services at each ramp step and measure AO/AM availability."""
    if spec.kind is not DrillKind.BLACKHOLE:
        raise ValueError("spec is not a blackhole drill")
    exempt = set(exempt)
    targets = spec.targets if spec.targets is not None else sorted(
        s for s, svc in fleet.services.items() if svc.failure_class.preemptible)
    targets = [t for t in targets if t not in exempt]
    roots = sorted(s for s, svc in fleet.services.items() if svc.failure_class.critical)
    rng = SeededRng(seed).child("blackhole").generator
    steps: List[DrillStep] = []
    first = None
    all_edges: List[str] = []
    for frac in spec.ramp:
        state = GraphState(blocked={t: frac for t in targets})
        ok = total = 0
        worst = 1.0
        failing, edges = [], set()
        for sid in roots:
            s_ok = 0
            for _ in range(spec.samples_per_service):
                out = evaluate_request(fleet, sid, state, rng)
                s_ok += out.success
                if not out.success and out.failed_edge is not None:
                    edges.add(out.failed_edge.label())
            avail = s_ok / spec.samples_per_service
            worst = min(worst, avail)
            if avail < spec.floor:
                failing.append(sid)
            ok += s_ok
            total += spec.samples_per_service
        agg = ok / total if total else 1.0
        step = DrillStep(frac, agg, worst, failing, sorted(edges))
        steps.append(step)
        if first is None and failing:
            first = frac
            all_edges = sorted(edges)
    return BlackholeReport(first is None, steps, first, all_edges)
