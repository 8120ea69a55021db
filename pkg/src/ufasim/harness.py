"""Scenario configuration, the scenario runner, metric aggregation and reports."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .burst import SpawnerConfig
from .depsafety import (ClassifierConfig, RegressionConfig, analyze_trace, edge_counts, find_tier_inversions,
                        is_regression, offboard_violations)
from .fleet import (LEGACY_POLICY, REFERENCE_PROFILE, PHASE1_POLICY, PHASE2_POLICY, DependencyEdge, EdgeKey,
                    FailureClass, Fleet, FleetConfig, Lifecycle, Semantics, capacity_ratio, generate_fleet)
from .orchestrator import (AlreadyInProgress, BurstUnsatisfiable, DrillKind, DrillSpec, NotFailedOver,
                           Orchestrator, Phase, reconcile_eligibility)
from .placement import QosConfig
from .simkernel import HOUR, MINUTE, SECOND, Simulator, parse_time
from .traffic import Mode, RequestOutcome, classify_scope, generate_workload
from .world import DEFAULT_LOAD, World, WorldConfig

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CRITICAL = (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE)
AVAILABILITY_NOTE = "availability approximates core-trip availability as AO+AM root-request success"


class ConfigError(ValueError):
    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class EmptyWindowWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# scenario config
# ---------------------------------------------------------------------------

_WORLD_TIME_FIELDS = {"tick", "cloud_latency", "city_interval", "convergence", "announce_interval", "stabilization"}
_SPAWNER_TIME_FIELDS = {"eviction_delay", "prefetch_time"}
EVENT_TYPES = ("failover", "failback")


@dataclass
class TriggerEvent:
    at: int
    type: str
    source: Optional[str] = None
    target: Optional[str] = None
    traffic_level: float = 1.0


@dataclass
class DepSafetyConfig:
    offboard_from_trace: bool = False
    trace_records: int = 100_000
    trace_failure_rate: float = 0.5
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    static_semantics: List[dict] = field(default_factory=list)
    inject_edges: List[dict] = field(default_factory=list)
    offboard: List[str] = field(default_factory=list)


@dataclass
class ScenarioConfig:
    name: str = "scenario"
    seed: int = 0
    horizon: int = 2 * HOUR
    fleet: Fleet = None
    world: WorldConfig = field(default_factory=WorldConfig)
    events: List[TriggerEvent] = field(default_factory=list)
    depsafety: DepSafetyConfig = field(default_factory=DepSafetyConfig)
    availability_window: int = HOUR
    fleet_spec: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], base_dir: Optional[Path] = None,
                  env: Optional[Mapping[str, str]] = None) -> "ScenarioConfig":
        errors: List[str] = []
        env = os.environ if env is None else env

        def grab(key, conv, default):
            if key not in d:
                return default
            try:
                return conv(d[key])
            except (TypeError, ValueError) as exc:
                errors.append(f"{key}: {exc}")
                return default

        name = str(d.get("name", "scenario"))
        seed = grab("seed", int, 0)
        if "UFA_SEED" in env and env["UFA_SEED"] != "":
            try:
                seed = int(env["UFA_SEED"])
            except ValueError:
                errors.append(f"UFA_SEED: not an integer: {env['UFA_SEED']!r}")
        if not 0 <= seed < 2**64:
            errors.append("seed: must be a 64-bit unsigned integer")
        horizon = grab("horizon", parse_time, 2 * HOUR)
        window = grab("availability_window", parse_time, HOUR)
        if window <= 0:
            errors.append("availability_window: must be positive")

        world = _world_config(d.get("world", {}), errors)
        fleet_spec = d.get("fleet", {"generate": {}})
        fleet = _build_fleet(fleet_spec, seed, base_dir, errors, world)

        events: List[TriggerEvent] = []
        for i, e in enumerate(d.get("events", [])):
            try:
                ev = TriggerEvent(parse_time(e["at"]), str(e["type"]), e.get("from"), e.get("to"),
                                  float(e.get("traffic_level", 1.0)))
            except (KeyError, TypeError, ValueError) as exc:
                errors.append(f"events[{i}]: {exc}")
                continue
            if ev.type not in EVENT_TYPES:
                errors.append(f"events[{i}].type: unknown event type {ev.type!r}")
            if ev.at > horizon:
                errors.append(f"events[{i}].at: {ev.at} ms is beyond the horizon {horizon} ms")
            if fleet is not None and ev.type == "failover":
                for key, val in (("from", ev.source), ("to", ev.target)):
                    if val not in fleet.regions:
                        errors.append(f"events[{i}].{key}: unknown region {val!r}")
            events.append(ev)
        events.sort(key=lambda e: e.at)

        ds = _depsafety_config(d.get("depsafety", {}), errors)
        if fleet is not None:
            for sid in ds.offboard:
                if sid not in fleet.services:
                    errors.append(f"depsafety.offboard: unknown service {sid!r}")
        known = {"name", "seed", "horizon", "availability_window", "world", "fleet", "events", "depsafety",
                 "description"}
        for k in d:
            if k not in known:
                errors.append(f"{k}: unknown field")
        if errors:
            raise ConfigError(errors)
        return cls(name, seed, horizon, fleet, world, events, ds, window, dict(fleet_spec))

    @classmethod
    def from_file(cls, path, env: Optional[Mapping[str, str]] = None) -> "ScenarioConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError([f"{path}: no such file"])
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: invalid JSON: {exc}"])
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be an object"])
        return cls.from_dict(data, path.parent, env)


def _world_config(d: Mapping[str, Any], errors: List[str]) -> WorldConfig:
    kwargs: Dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(WorldConfig)}
    for k, v in d.items():
        if k not in names:
            errors.append(f"world.{k}: unknown field")
            continue
        try:
            if k in _WORLD_TIME_FIELDS:
                v = parse_time(v)
            elif k == "qos":
                v = QosConfig(float(v.get("evict_above", 0.75)), float(v.get("cool_below", 0.70)),
                              tuple(FailureClass(c) for c in v.get("eviction_order", ["Terminate", "RestoreLater"])))
            elif k == "spawner":
                sp = dict(v)
                for tk in _SPAWNER_TIME_FIELDS & set(sp):
                    sp[tk] = parse_time(sp[tk])
                v = SpawnerConfig(**sp)
            elif k == "city_batches":
                v = tuple(float(x) for x in v)
            elif k == "load_coefficients":
                merged = dict(DEFAULT_LOAD)
                for ck, cv in v.items():
                    merged[FailureClass(ck).value] = float(cv)
                v = merged
            elif k == "cloud_quotas":
                v = {str(z): int(q) for z, q in v.items()}
            kwargs[k] = v
        except (TypeError, ValueError, AttributeError) as exc:
            errors.append(f"world.{k}: {exc}")
    try:
        return WorldConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"world: {exc}")
        return WorldConfig()


def _depsafety_config(d: Mapping[str, Any], errors: List[str]) -> DepSafetyConfig:
    out = DepSafetyConfig()
    for k, v in d.items():
        if k == "classifier":
            try:
                out.classifier = ClassifierConfig(**v)
            except (TypeError, ValueError) as exc:
                errors.append(f"depsafety.classifier: {exc}")
        elif k in ("offboard_from_trace",):
            out.offboard_from_trace = bool(v)
        elif k in ("trace_records",):
            out.trace_records = int(v)
        elif k in ("trace_failure_rate",):
            out.trace_failure_rate = float(v)
        elif k in ("static_semantics", "inject_edges", "offboard"):
            setattr(out, k, list(v))
        else:
            errors.append(f"depsafety.{k}: unknown field")
    return out


def _build_fleet(spec: Mapping[str, Any], seed: int, base_dir: Optional[Path], errors: List[str],
                 world: WorldConfig) -> Optional[Fleet]:
    try:
        if "path" in spec:
            p = Path(spec["path"])
            if not p.is_absolute() and base_dir is not None:
                p = base_dir / p
            return Fleet.loads(p.read_text(encoding="utf-8"))
        if "inline" in spec:
            return Fleet.from_json(spec["inline"])
        gen = spec.get("generate", {})
        cfg_d = dict(gen.get("config", {}))
        for k in ("regions", "replica_sizes", "batch_job_cores", "nonprod_env_kinds"):
            if k in cfg_d:
                cfg_d[k] = tuple(cfg_d[k])
        if "base_startup" in cfg_d:
            cfg_d["base_startup"] = parse_time(cfg_d["base_startup"])
        cfg_d.setdefault("pools", dict(world.pools))
        fcfg = FleetConfig(**cfg_d)
        profile = gen.get("profile", "reference")
        if profile == "reference":
            profile = REFERENCE_PROFILE
        return generate_fleet(int(gen.get("seed", seed)), float(gen.get("scale", 0.005)), profile, fcfg)
    except FileNotFoundError as exc:
        errors.append(f"fleet.path: {exc}")
    except (TypeError, ValueError, KeyError) as exc:
        errors.append(f"fleet: {exc}")
    return None


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def compute_availability(outcomes: Iterable[RequestOutcome], window: Optional[Tuple[int, int]] = None,
                         exclude_tagged: bool = True, roots: Optional[Iterable[str]] = None) -> float:
    """Successes over root requests in ``[start, end)``, optionally restricted to ``roots``."""
    root_set = set(roots) if roots is not None else None
    ok = total = 0
    for o in outcomes:
        if window is not None and not window[0] <= o.time < window[1]:
            continue
        if root_set is not None and o.root not in root_set:
            continue
        if exclude_tagged and o.failover_tagged:
            continue
        total += 1
        ok += o.success
    if total == 0:
        warnings.warn(f"no requests in availability window {window}", EmptyWindowWarning, stacklevel=2)
        return 1.0
    return ok / total


def critical_roots(fleet: Fleet, classes=CRITICAL) -> List[str]:
    return sorted(s for s, svc in fleet.services.items() if svc.failure_class in classes)


def compute_utilization(samples: Iterable[Tuple[int, str, float, float]], window: Optional[Tuple[int, int]] = None
                        ) -> Dict[str, Dict[str, float]]:
    """Per-region mean and P99 of sampled utilization within ``[start, end)``.

    ``samples`` are (time, region, mean-over-hosts, p99-over-hosts) rows.
    """
    by_region: Dict[str, List[Tuple[float, float]]] = {}
    for t, r, mean, p99 in samples:
        if window is not None and not window[0] <= t < window[1]:
            continue
        by_region.setdefault(r, []).append((mean, p99))
    out = {}
    for r, rows in sorted(by_region.items()):
        arr = np.array(rows)
        out[r] = {"mean": float(arr[:, 0].mean()), "p99": float(np.percentile(arr[:, 1], 99)),
                  "samples": len(rows)}
    return out


@dataclass
class EndpointDelta:
    root: str
    baseline_error: float
    drill_error: float
    baseline_tpc: float
    drill_tpc: float
    regression: bool


@dataclass
class BaselineComparison:
    baseline_window: Tuple[int, int]
    drill_window: Tuple[int, int]
    deltas: List[EndpointDelta]

    @property
    def regressions(self) -> List[str]:
        return [d.root for d in self.deltas if d.regression]

    def to_json(self) -> dict:
        return {"baseline_window": list(self.baseline_window), "drill_window": list(self.drill_window),
                "regressions": self.regressions, "deltas": [dataclasses.asdict(d) for d in self.deltas]}


def compare_baseline(outcomes: Sequence[RequestOutcome], baseline_window: Tuple[int, int],
                     drill_window: Tuple[int, int], thresholds: RegressionConfig = RegressionConfig(),
                     exclude_tagged: bool = True, cores: Optional[Mapping[str, float]] = None,
                     roots: Optional[Iterable[str]] = None) -> BaselineComparison:
    """Per-root error rate and throughput-per-core in two windows.

    Identical windows are allowed and give zero deltas; otherwise the windows
    must not overlap.
    """
    b0, b1 = baseline_window
    d0, d1 = drill_window
    if (b0, b1) != (d0, d1) and b0 < d1 and d0 < b1:
        raise ValueError("baseline and drill windows overlap")
    root_set = set(roots) if roots is not None else None

    def tally(w0, w1):
        acc: Dict[str, List[int]] = {}
        for o in outcomes:
            if not w0 <= o.time < w1 or (exclude_tagged and o.failover_tagged):
                continue
            if root_set is not None and o.root not in root_set:
                continue
            a = acc.setdefault(o.root, [0, 0])
            a[0] += 1
            a[1] += not o.success
        return acc

    base, drill = tally(b0, b1), tally(d0, d1)
    deltas = []
    for root in sorted(set(base) | set(drill)):
        bn, bf = base.get(root, [0, 0])
        dn, df = drill.get(root, [0, 0])
        be = bf / bn if bn else 0.0
        de = df / dn if dn else 0.0
        c = (cores or {}).get(root, 1.0) or 1.0
        btpc = (bn - bf) / (c * max(b1 - b0, 1) / HOUR)
        dtpc = (dn - df) / (c * max(d1 - d0, 1) / HOUR)
        deltas.append(EndpointDelta(root, be, de, btpc, dtpc, is_regression(de, be, thresholds)))
    return BaselineComparison(baseline_window, drill_window, deltas)


# ---------------------------------------------------------------------------
# running
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    data: Dict[str, Any]
    city_availability: List[Tuple[int, str, float]]
    utilization: List[Tuple[int, str, float, float]]
    cores_by_class: List[dict]
    burst_ramp: List[Tuple[int, str, int]]

    def to_json(self) -> str:
        return json.dumps(self.data, sort_keys=True, indent=1)

    def write(self, run_dir) -> Path:
        out = Path(run_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(self.to_json() + "\n", encoding="utf-8")
        _write_csv(out / "city_availability.csv", ["time", "city", "availability"], self.city_availability)
        _write_csv(out / "utilization.csv", ["time", "region", "mean", "p99"], self.utilization)
        cols = ["time", "AO", "AM_steady", "AM_bursted", "RL_steady", "RL_not_bursted", "RL_bursted", "T", "T_exempt"]
        _write_csv(out / "cores_by_class.csv", cols, [[r[c] for c in cols] for r in self.cores_by_class])
        _write_csv(out / "burst_ramp.csv", ["time", "cluster", "cores_online"], self.burst_ramp)
        return out


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in r])


@dataclass
class RunResult:
    config: ScenarioConfig
    world: World
    orchestrator: Orchestrator
    report: MetricsReport
    errors: List[str]

    @property
    def event_log(self) -> bytes:
        return self.world.sim.event_log_bytes()


class _Monitor:
    """Invariant checks evaluated after every delivered event."""

    def __init__(self, world: World, orch: Orchestrator):
        self.world = world
        self.orch = orch
        self.am_violations: List[Tuple[int, str]] = []
        self.t_violations: List[Tuple[int, str]] = []
        self.ao_lost: List[Tuple[int, str]] = []
        self._checked_version = -1
        self._am = [e for e in world.fleet.environments.values()
                    if world.svc(e).failure_class is FailureClass.ACTIVE_MIGRATE]
        self._ao = [e for e in world.fleet.environments.values()
                    if world.svc(e).failure_class is FailureClass.ALWAYS_ON]
        self._t = [e for e in world.fleet.environments.values()
                   if world.svc(e).failure_class is FailureClass.TERMINATE]

    def __call__(self, ev) -> None:
        w = self.world
        key = (w.version, self.orch.state.phase)
        if key == self._checked_version:
            return
        self._checked_version = key
        t = w.sim.now
        for e in self._am:
            if e.serving_replicas < e.required_replicas and e.service_id not in w.ineligible:
                if not self.am_violations or self.am_violations[-1] != (t, e.id):
                    self.am_violations.append((t, e.id))
        for e in self._ao:
            if e.serving_replicas < e.required_replicas:
                self.ao_lost.append((t, e.id))
        if self.orch.state.phase is Phase.FAILED_OVER and self.orch.state.mode is Mode.PEAK:
            target = self.orch.state.target
            for e in self._t:
                if e.region == target and e.service_id not in w.offboarded and \
                        e.service_id not in w.ineligible and e.serving_replicas > 0:
                    self.t_violations.append((t, e.id))


def _resolve_edge(fleet: Fleet, spec: Mapping[str, Any]) -> DependencyEdge:
    sem = Semantics(spec.get("semantics", spec.get("ground_truth", "FailClose")))
    if "caller" in spec:
        return DependencyEdge(tuple(spec["caller"]), tuple(spec["callee"]), ground_truth=sem,
                              weight=float(spec.get("weight", 1.0)), attempts=int(spec.get("attempts", 1)))
    return pick_inversion_edge(fleet, FailureClass(spec["caller_class"]), FailureClass(spec["callee_class"]), sem)


def _reaches(fleet: Fleet, src: str, dst: str) -> bool:
    seen, stack = set(), [src]
    while stack:
        s = stack.pop()
        if s == dst:
            return True
        if s in seen:
            continue
        seen.add(s)
        stack.extend(e.callee[0] for e in fleet.out_edges(s))
    return False


def pick_inversion_edge(fleet: Fleet, caller_cls: FailureClass, callee_cls: FailureClass,
                        semantics: Semantics = Semantics.FAIL_CLOSE) -> DependencyEdge:
    """A new caller -> callee edge between the first eligible services of the two classes.

    Picks the largest caller and callee (by cores, then id) whose pairing
    keeps the call graph acyclic and is not already an edge.
    """
    def ranked(fc):
        return sorted((s for s in fleet.services.values() if s.failure_class is fc),
                      key=lambda s: (-s.total_cores, s.id))
    existing = {(e.caller[0], e.callee[0]) for e in fleet.edges}
    for caller in ranked(caller_cls):
        for callee in ranked(callee_cls):
            if (caller.id, callee.id) in existing or _reaches(fleet, callee.id, caller.id):
                continue
            return DependencyEdge((caller.id, 0), (callee.id, 0), ground_truth=semantics, weight=1.0)
    raise ValueError(f"no acyclic {caller_cls.value} -> {callee_cls.value} pair")


def prepare_fleet(cfg: ScenarioConfig) -> Tuple[Fleet, Dict[EdgeKey, Semantics], List]:
    """Apply injected edges, then compute the edge semantics the safety tooling sees."""
    fleet = Fleet.from_json(cfg.fleet.to_json())
    for spec in cfg.depsafety.inject_edges:
        fleet.add_edge(_resolve_edge(fleet, spec))
    fleet.reindex()
    semantics: Dict[EdgeKey, Semantics] = {}
    counts = None
    if cfg.depsafety.offboard_from_trace:
        wl = generate_workload(fleet, cfg.seed, HOUR, cfg.depsafety.trace_records, n_roots=0,
                               callee_failure_rate=cfg.depsafety.trace_failure_rate, edge_sampling="uniform")
        counts = edge_counts(wl.trace)
        semantics.update(analyze_trace(wl.trace, cfg.depsafety.classifier))
    for spec in cfg.depsafety.static_semantics:
        e = _resolve_edge(fleet, spec)
        semantics[e.key] = Semantics(spec.get("semantics", "FailClose"))
    violations = find_tier_inversions(fleet, semantics, "runtime", counts) if semantics else []
    return fleet, semantics, violations


def offboarded_services(cfg: ScenarioConfig) -> Tuple[Fleet, Set[str]]:
    """The prepared fleet and the services off-boarded from termination for it."""
    fleet, _, violations = prepare_fleet(cfg)
    return fleet, offboard_violations(fleet, violations) | set(cfg.depsafety.offboard)


def build(cfg: ScenarioConfig) -> Tuple[World, Orchestrator, _Monitor, List]:
    fleet, semantics, violations = prepare_fleet(cfg)
    sim = Simulator(horizon=cfg.horizon, quiet=("tick",))
    world = World(fleet, cfg.world, cfg.seed, sim)
    world.offboarded = offboard_violations(fleet, violations) | set(cfg.depsafety.offboard)
    delta = reconcile_eligibility(fleet, 0, world.offboarded, cfg.world.stabilization)
    world.ineligible = {s for s, why in delta.excluded.items() if why != "offboarded"}
    unplaced = world.place_steady_state()
    if unplaced:
        sim.emit("steady_state_unplaced", {"replicas": sum(unplaced.values()), "envs": len(unplaced)})
    orch = Orchestrator(world)
    monitor = _Monitor(world, orch)
    sim.observe(monitor)
    return world, orch, monitor, violations


def run_scenario(cfg: ScenarioConfig) -> RunResult:
    world, orch, monitor, violations = build(cfg)
    sim = world.sim
    errors: List[str] = []

    def trigger(ev):
        kind = ev.payload["type"]
        try:
            if kind == "failover":
                orch.initiate_failover(ev.payload["from"], ev.payload["to"], ev.payload["traffic_level"])
            else:
                orch.initiate_failback()
        except (AlreadyInProgress, BurstUnsatisfiable, NotFailedOver) as exc:
            errors.append(f"{type(exc).__name__}: {exc}")
            sim.emit("trigger_failed", {"type": kind, "error": type(exc).__name__})

    sim.emit("scenario_start", {"name": cfg.name, "seed": cfg.seed, "offboarded": sorted(world.offboarded),
                                "violations": len(violations)})
    world.start_ticks(0)
    for e in cfg.events:
        sim.schedule(e.at, "trigger", {"type": e.type, "from": e.source, "to": e.target,
                                       "traffic_level": e.traffic_level}, callback=trigger)
    sim.run_until(cfg.horizon)
    report = build_report(cfg, world, orch, monitor, violations, errors)
    return RunResult(cfg, world, orch, report, errors)


def _window_series(world: World, window: int, horizon: int, roots: Sequence[str]) -> List[dict]:
    out = []
    root_set = set(roots)
    n_windows = max(1, -(-horizon // window))
    acc = [[0, 0] for _ in range(n_windows)]
    for o in world.outcomes:
        if o.root not in root_set or o.failover_tagged:
            continue
        i = min(o.time // window, n_windows - 1)
        acc[i][0] += 1
        acc[i][1] += o.success
    for i, (n, ok) in enumerate(acc):
        out.append({"start": i * window, "end": min((i + 1) * window, horizon), "requests": n,
                    "availability": ok / n if n else 1.0})
    return out


def _city_series(world: World, window: int, horizon: int, roots: Sequence[str]) -> List[Tuple[int, str, float]]:
    root_set = set(roots)
    n_windows = max(1, -(-horizon // window))
    acc: Dict[Tuple[int, str], List[int]] = {}
    for o in world.outcomes:
        if o.root not in root_set or o.failover_tagged:
            continue
        a = acc.setdefault((min(o.time // window, n_windows - 1), o.city), [0, 0])
        a[0] += 1
        a[1] += o.success
    rows = []
    for i in range(n_windows):
        for c in sorted(world.fleet.cities):
            n, ok = acc.get((i, c), (0, 0))
            rows.append((i * window, c, ok / n if n else 1.0))
    return rows


def build_report(cfg: ScenarioConfig, world: World, orch: Orchestrator, monitor: _Monitor,
                 violations: List, errors: List[str]) -> MetricsReport:
    fleet = world.fleet
    horizon = cfg.horizon
    ao_roots = critical_roots(fleet, (FailureClass.ALWAYS_ON,))
    crit_roots = critical_roots(fleet)
    ao_windows = _window_series(world, cfg.availability_window, horizon, ao_roots)
    crit_windows = _window_series(world, cfg.availability_window, horizon, crit_roots)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyWindowWarning)
        crit = compute_availability(world.outcomes, None, True, crit_roots)
        ao = compute_availability(world.outcomes, None, True, ao_roots)

    trans = orch.state.transitions
    first = {}
    for p, t in trans:
        first.setdefault(p, t)
    failed_over_at = first.get(Phase.FAILED_OVER.value)
    failover_at = next((t for p, t in trans if p == Phase.LOCKED.value or p == Phase.MIGRATING.value), None)
    failback_at = first.get(Phase.FAILING_BACK.value)
    pre_window = (0, failover_at if failover_at is not None else horizon)
    util = {"steady_before_failover": compute_utilization(world.util_samples, pre_window)}
    if failed_over_at is not None:
        util["failed_over"] = compute_utilization(world.util_samples, (failed_over_at, failback_at or horizon))

    downtime = {}
    for eid, rec in sorted(world.downtime.items()):
        downtime[eid] = {"terminated_at": rec.terminated_at, "restored_at": rec.restored_at,
                         "downtime_ms": rec.downtime, "rto_ms": rec.rto, "rto_ok": rec.rto_ok}
    rl_records = [r for r in world.downtime.values() if r.rto is not None]
    rl_ok = all(r.rto_ok for r in rl_records)

    per_hour: Dict[int, int] = {}
    for t, _, _, kind in world.evictions:
        if kind == "Evict":
            per_hour[t // HOUR] = per_hour.get(t // HOUR, 0) + 1

    cloud_hosts = sum(len(c.hosts) for c in fleet.clusters.values() if c.kind.value == "Cloud")
    burst_clusters = sum(1 for c in fleet.clusters.values() if c.kind.value == "Burst")
    ratios = {"legacy": capacity_ratio(fleet, LEGACY_POLICY), "phase1": capacity_ratio(fleet, PHASE1_POLICY),
              "phase2": capacity_ratio(fleet, PHASE2_POLICY)}
    evict_restart = sum(j.restart_cost for jobs in world.evicted_jobs.values() for j in jobs)
    shape = cores_shape_checks(world.cores_by_class, trans)
    data = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "scenario": cfg.name,
        "seed": cfg.seed,
        "horizon_ms": horizon,
        "note": AVAILABILITY_NOTE,
        "fleet": {"services": len(fleet.services), "edges": len(fleet.edges), "cities": len(fleet.cities),
                  "cores": sum(s.total_cores for s in fleet.services.values())},
        "availability": {"critical": crit, "ao": ao, "ao_windows": ao_windows, "critical_windows": crit_windows,
                         "min_ao_window": min(w["availability"] for w in ao_windows),
                         "requests": len(world.outcomes)},
        "utilization": util,
        "downtime": downtime,
        "evictions_per_hour": {str(k): v for k, v in sorted(per_hour.items())},
        "qos_alarms": len(world.qos_alarms),
        "capacity_ratio": ratios,
        "phases": [[p, t] for p, t in trans],
        "final_phase": orch.state.phase.value,
        "mode": orch.state.mode.value if orch.state.mode else None,
        "orchestrator": orch.report,
        "depsafety": {"violations": [v.to_json() for v in violations], "offboarded": sorted(world.offboarded),
                      "ineligible": sorted(world.ineligible)},
        "batch_restart_cost_ms": evict_restart,
        "errors": errors,
        "checks": {
            "ao_availability_min_window": min(w["availability"] for w in ao_windows),
            "rl_rto_ok": rl_ok,
            "rl_restored": len([r for r in rl_records if r.restored_at is not None]),
            "rl_terminated": len(rl_records),
            "am_mbb_violations": len(monitor.am_violations),
            "ao_capacity_loss_events": len(monitor.ao_lost),
            "terminate_serving_while_failed_over": len(monitor.t_violations),
            "cloud_hosts_at_end": cloud_hosts,
            "burst_clusters_at_end": burst_clusters,
            "cloud_cores_provisioned_at_end": world.provider.total_provisioned,
            "cores_shape": shape,
        },
    }
    report = MetricsReport(data, _city_series(world, cfg.availability_window, horizon, crit_roots),
                           world.util_samples, world.cores_by_class, world.burst_ramp)
    return report


def cores_shape_checks(rows: Sequence[dict], transitions: Sequence[Tuple[str, int]], rto: int = HOUR) -> Dict[str, Any]:
    """Shape checks over the cores-by-class series of the failover target region."""
    if not rows:
        return {"available": False}
    first = {}
    for p, t in transitions:
        first.setdefault(p, t)
    start = first.get(Phase.EVICTING.value)
    am_total = rows[0]["AM_steady"] + rows[0]["AM_bursted"]
    am_ok = all(r["AM_steady"] + r["AM_bursted"] >= am_total for r in rows)
    am_rest = [r for r in rows if r["AM_steady"] + r["AM_bursted"] != am_total]
    out: Dict[str, Any] = {"available": True, "am_total": am_total, "am_conserved": am_ok,
                           "am_over_total_samples": len(am_rest)}
    if start is None:
        return out
    rl_total = max(r["RL_not_bursted"] for r in rows)
    after = [r for r in rows if r["time"] >= start]
    spike = after[0]["RL_not_bursted"] if after else 0
    zero_at = next((r["time"] for r in after if r["RL_not_bursted"] == 0), None)
    failed = first.get(Phase.FAILED_OVER.value)
    back = first.get(Phase.FAILING_BACK.value)
    in_failover = [r for r in rows if failed is not None and failed <= r["time"] < (back or 1 << 62)]
    t_zero = all(r["T"] == 0 for r in in_failover)
    rl_conserved = all(r["RL_not_bursted"] + r["RL_bursted"] == rl_total
                       for r in rows if start <= r["time"] < (back or 1 << 62))
    out.update({"rl_terminated_cores": rl_total, "rl_spike": spike, "rl_spike_is_total": spike == rl_total,
                "rl_zero_at": zero_at,
                "rl_decay_within_rto": zero_at is not None and zero_at - start <= rto,
                "rl_conserved": rl_conserved, "terminate_zero_while_failed_over": t_zero})
    return out


# ---------------------------------------------------------------------------
# failover certification drill
# ---------------------------------------------------------------------------

def run_failover_certification(cfg: ScenarioConfig, spec: DrillSpec) -> Dict[str, Any]:
    """Fail over and back on the scenario's fleet and compare against the pre-drill baseline."""
    if spec.kind is not DrillKind.FAILOVER_CERTIFICATION:
        raise ValueError("spec is not a failover certification drill")
    fleet = cfg.fleet
    source = spec.source or fleet.regions[0]
    target = fleet.other_region(source)
    level = 1.0 if spec.peak_condition else 0.5
    run_cfg = dataclasses.replace(cfg, events=[
        TriggerEvent(spec.failover_at, "failover", source, target, level),
        TriggerEvent(spec.failback_at, "failback")],
        horizon=max(cfg.horizon, spec.failback_at + 2 * HOUR))
    result = run_scenario(run_cfg)
    w = result.world
    tv_peak = sum(c.weekly_peak() for c in fleet.cities.values())
    users_per = float(np.mean([c.users_on_trip_per_rps for c in fleet.cities.values()])) if fleet.cities else 0.0
    users = tv_peak * level * users_per
    failed_cities = sum(1 for c in fleet.cities.values() if c.primary_region == source)
    scope = classify_scope(users, tv_peak * users_per, failed_cities, len(fleet.cities))
    cores = {s: svc.total_cores / 2 for s, svc in w.fleet.services.items()}
    comparison = compare_baseline(w.outcomes, (0, spec.failover_at), (spec.failover_at, spec.failback_at),
                                  cores=cores, roots=critical_roots(w.fleet))
    terminated = sorted({eid.split("@")[0] for eid in w.downtime})
    return {
        "kind": spec.kind.value,
        "mode": result.orchestrator.state.mode.value if result.orchestrator.state.mode else None,
        "scope": {"peak": scope.peak, "full": scope.full},
        "errors": result.errors,
        "final_phase": result.orchestrator.state.phase.value,
        "comparison": comparison.to_json(),
        "regressions": comparison.regressions,
        "terminated_services": terminated,
        "offboarded": sorted(w.offboarded),
        "checks": result.report.data["checks"],
    }
