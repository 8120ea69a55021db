"""Command-line entry point (``ufa``)."""
from __future__ import annotations

import argparse
import concurrent.futures
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from .depsafety import (ROLLBACK, ClassifierConfig, NoBaseline, analyze_trace, canary_gate, canary_window_error_rates,
                        edge_counts, find_tier_inversions, read_trace, violation_report, write_trace)
from .fleet import (DEFAULT_POOLS, REFERENCE_PROFILE, DependencyEdge, Fleet, FleetConfig, Semantics, generate_fleet,
                    pool_for)
from .harness import (ConfigError, ScenarioConfig, TriggerEvent, offboarded_services, run_failover_certification,
                      run_scenario)
from .orchestrator import DrillKind, DrillSpec, run_blackhole_drill
from .placement import OvercommitParams, PlacementRequest, Unsatisfiable, advertise_pools, max_overcommit, schedule
from .simkernel import HOUR, parse_time
from .traffic import generate_workload

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GATE = 3

log = logging.getLogger("ufa")


def _dump(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, indent=1)


def _table(rows: Sequence[Sequence[Any]], header: Sequence[str]) -> str:
    cells = [[str(h) for h in header]] + [[f"{c:.6g}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _load_fleet(path: str) -> Fleet:
    try:
        return Fleet.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError([f"{path}: invalid fleet: {exc}"])


def _load_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError([f"{path}: no such file"])
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON: {exc}"])


# ---------------------------------------------------------------------------
# run / failback / sweep
# ---------------------------------------------------------------------------

def _summary(data: dict) -> str:
    av = data["availability"]
    checks = data["checks"]
    rows = [
        ("scenario", data["scenario"]),
        ("final phase", data["final_phase"]),
        ("critical availability", f"{av['critical']:.6f}"),
        ("min hourly AO availability", f"{av['min_ao_window']:.6f}"),
        ("RL restored / terminated", f"{checks['rl_restored']}/{checks['rl_terminated']}"),
        ("RL within RTO", checks["rl_rto_ok"]),
        ("AM make-before-break violations", checks["am_mbb_violations"]),
        ("Terminate serving while failed over", checks["terminate_serving_while_failed_over"]),
        ("QoS alarms", data["qos_alarms"]),
    ]
    for label, block in sorted(data["utilization"].items()):
        for region, u in block.items():
            rows.append((f"util {label} {region}", f"mean {u['mean']:.3f} p99 {u['p99']:.3f}"))
    if data["errors"]:
        rows.append(("errors", "; ".join(data["errors"])))
    return _table(rows, ("metric", "value"))


def _execute(cfg: ScenarioConfig, out: Optional[str], event_log: Optional[str], fmt: str) -> int:
    result = run_scenario(cfg)
    out_dir = Path(out) if out else Path("runs") / cfg.name
    result.report.write(out_dir)
    if event_log:
        result.world.sim.write_event_log(event_log)
    print(result.report.to_json() if fmt == "json" else _summary(result.report.data))
    print(f"report written to {out_dir}", file=sys.stderr)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = ScenarioConfig.from_file(args.scenario)
    return _execute(cfg, args.out, args.event_log, args.format)


def cmd_failback(args) -> int:
    cfg = ScenarioConfig.from_file(args.scenario)
    at = parse_time(args.at)
    if not any(e.type == "failover" and e.at < at for e in cfg.events):
        raise ConfigError([f"--at: no failover is scheduled before {args.at}"])
    events = [e for e in cfg.events if e.type != "failback"] + [TriggerEvent(at, "failback")]
    events.sort(key=lambda e: e.at)
    cfg = dataclasses.replace(cfg, events=events, horizon=max(cfg.horizon, at + 2 * HOUR))
    return _execute(cfg, args.out, args.event_log, args.format)


def _sweep_one(path: str, out_root: str) -> Dict[str, Any]:
    try:
        cfg = ScenarioConfig.from_file(path)
    except ConfigError as exc:
        return {"scenario": path, "error": str(exc)}
    result = run_scenario(cfg)
    out_dir = Path(out_root) / Path(path).stem
    result.report.write(out_dir)
    data = result.report.data
    return {"scenario": path, "out": str(out_dir), "final_phase": data["final_phase"],
            "critical_availability": data["availability"]["critical"]}


def cmd_sweep(args) -> int:
    paths = sorted(str(p) for p in Path(args.dir).glob("*.json"))
    if not paths:
        raise ConfigError([f"{args.dir}: no scenario files"])
    if args.jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(args.jobs) as ex:
            rows = list(ex.map(_sweep_one, paths, [args.out] * len(paths)))
    else:
        rows = [_sweep_one(p, args.out) for p in paths]
    print(_dump(rows))
    return EXIT_CONFIG if any("error" in r for r in rows) else EXIT_OK


# ---------------------------------------------------------------------------
# drills
# ---------------------------------------------------------------------------

def _drill_spec(d: dict, kind: DrillKind) -> DrillSpec:
    fields = {f.name for f in dataclasses.fields(DrillSpec)}
    kw = {k: v for k, v in d.items() if k in fields}
    for k in ("failover_at", "failback_at"):
        if k in kw:
            kw[k] = parse_time(kw[k])
    kw["kind"] = kind
    try:
        return DrillSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError([f"drill: {exc}"])


def cmd_drill(args) -> int:
    d = _load_json(args.spec)
    if "scenario" not in d:
        raise ConfigError(["drill: 'scenario' path is required"])
    scen = Path(d["scenario"])
    if not scen.is_absolute():
        scen = Path(args.spec).parent / scen
    cfg = ScenarioConfig.from_file(scen)
    if args.kind == "blackhole":
        spec = _drill_spec(d, DrillKind.BLACKHOLE)
        fleet, offboarded = offboarded_services(cfg)
        report = run_blackhole_drill(fleet, spec, cfg.seed, exempt=sorted(offboarded))
        out = report.to_json()
        ok = report.certified
    else:
        spec = _drill_spec(d, DrillKind.FAILOVER_CERTIFICATION)
        out = run_failover_certification(cfg, spec)
        ok = not out["regressions"] and not out["errors"]
    print(_dump(out))
    return EXIT_OK if ok else EXIT_GATE


# ---------------------------------------------------------------------------
# dependency safety
# ---------------------------------------------------------------------------

def cmd_deps_analyze(args) -> int:
    cfg = ClassifierConfig(args.min_samples, args.fail_close, args.fail_open)
    try:
        trace = list(read_trace(args.trace))
    except FileNotFoundError:
        raise ConfigError([f"{args.trace}: no such file"])
    except (ValueError, KeyError) as exc:
        raise ConfigError([f"{args.trace}: invalid trace: {exc}"])
    semantics = analyze_trace(trace, cfg)
    counts = edge_counts(trace)
    if args.fleet:
        fleet = _load_fleet(args.fleet)
        print(violation_report(find_tier_inversions(fleet, semantics, "runtime", counts)))
    else:
        rows = [{"edge": k.label(), "semantics": s.value, "n": counts[k][0], "k": counts[k][1]}
                for k, s in sorted(semantics.items(), key=lambda kv: kv[0].label())]
        print(_dump(rows))
    return EXIT_OK


def cmd_deps_trace(args) -> int:
    fleet = _load_fleet(args.fleet)
    wl = generate_workload(fleet, args.seed, HOUR, args.records, n_roots=0,
                           callee_failure_rate=args.failure_rate, edge_sampling="uniform")
    n = write_trace(args.output, wl.trace)
    print(f"wrote {n} records to {args.output}", file=sys.stderr)
    return EXIT_OK


def _edges(items: List[dict]) -> List[DependencyEdge]:
    try:
        return [DependencyEdge(tuple(e["caller"]), tuple(e["callee"]),
                               ground_truth=Semantics(e.get("semantics", "FailClose")),
                               weight=float(e.get("weight", 1.0)), attempts=int(e.get("attempts", 1)))
                for e in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError([f"deployment: {exc}"])


def cmd_deps_canary(args) -> int:
    fleet = _load_fleet(args.fleet)
    deployment = _edges(_load_json(args.deployment)) if args.deployment else []
    if args.baseline:
        baseline = _load_json(args.baseline)
    else:
        baseline = canary_window_error_rates(fleet, (), seed=args.seed, samples_per_service=args.samples)
    try:
        verdict = canary_gate(fleet, deployment, baseline, seed=args.seed, samples_per_service=args.samples)
    except NoBaseline as exc:
        raise ConfigError([str(exc)])
    print(_dump({"verdict": verdict.verdict, "regressions": verdict.regressions}))
    return EXIT_GATE if verdict.verdict == ROLLBACK else EXIT_OK


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def cmd_plan_overcommit(args) -> int:
    fleet = _load_fleet(args.fleet)
    try:
        params = OvercommitParams(args.M_h, args.M_s, args.alpha_m, args.alpha_c)
    except ValueError as exc:
        raise ConfigError([str(exc)])
    factor = args.factor if args.factor is not None else max_overcommit(params)
    if factor > max_overcommit(params) + 1e-9:
        raise ConfigError([f"--factor {factor} exceeds the memory-safe maximum {max_overcommit(params):.4f}"])
    hosts = []
    for h in sorted(fleet.hosts.values(), key=lambda h: h.id):
        adv = advertise_pools(h.physical_cores, factor, h.id)
        h.stateless_pool, h.overcommit_pool = adv.stateless_cores, adv.overcommit_cores
        h.allocations = {}
        hosts.append(h)
    infeasible: Dict[str, Dict[str, int]] = {}
    for region in fleet.regions:
        rhosts = [h for h in hosts if fleet.clusters[h.cluster].region == region
                  and fleet.clusters[h.cluster].kind.value == "Steady"]
        reqs = []
        for env in sorted(fleet.environments.values(), key=lambda e: e.id):
            if env.region != region:
                continue
            svc = fleet.services[env.service_id]
            pool = pool_for(DEFAULT_POOLS, svc.failure_class)
            reqs.append(PlacementRequest(env.id, pool, max(1, env.required_replicas), svc.cores_per_replica,
                                         svc.cores_per_replica * svc.mem_per_core))
        reqs.sort(key=lambda r: (-r.cores_per_replica, r.env_id))
        res = schedule(reqs, rhosts, params.alpha_m)
        if res.unplaced:
            infeasible[region] = dict(sorted(res.unplaced.items()))
    table = [{"host": h.id, "physical": h.physical_cores, "stateless": h.stateless_pool,
              "overcommit": h.overcommit_pool} for h in hosts]
    out = {"factor": factor, "max_factor": max_overcommit(params), "hosts": table,
           "infeasible": infeasible, "feasible": not infeasible}
    if args.format == "json":
        print(_dump(out))
    else:
        print(f"factor {factor:.4f} (max {max_overcommit(params):.4f})")
        print(_table([(r["host"], r["physical"], r["stateless"], r["overcommit"]) for r in table],
                     ("host", "physical", "stateless", "overcommit")))
        if infeasible:
            for region, un in infeasible.items():
                print(f"infeasible in {region}: {sum(un.values())} replicas across {len(un)} environments")
        else:
            print("all environments placed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# fleet / report
# ---------------------------------------------------------------------------

def cmd_fleet_generate(args) -> int:
    fleet = generate_fleet(args.seed, args.scale, REFERENCE_PROFILE, FleetConfig())
    Path(args.output).write_text(fleet.dumps(), encoding="utf-8")
    print(f"wrote {len(fleet.services)} services to {args.output}", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    path = run_dir / "report.json"
    if not path.exists():
        raise ConfigError([f"{run_dir}: no report.json"])
    data = json.loads(path.read_text(encoding="utf-8"))
    if data.get("schema_version") != 1:
        raise ConfigError([f"{path}: unsupported schema_version {data.get('schema_version')!r}"])
    if args.format == "json":
        print(_dump(data))
    elif args.format == "table":
        print(_summary(data))
    else:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["window_start", "window_end", "requests", "ao_availability"])
        for row in data["availability"]["ao_windows"]:
            w.writerow([row["start"], row["end"], row["requests"], f"{row['availability']:.6f}"])
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_output_args(p) -> None:
    p.add_argument("--out", help="run directory for report.json and CSV sidecars")
    p.add_argument("--event-log", help="write the event log as JSONL to this path")
    p.add_argument("--format", choices=("json", "table"), default="table")


def _add_plan_args(p) -> None:
    p.add_argument("fleet", help="fleet JSON")
    p.add_argument("--M-h", dest="M_h", type=float, default=8.0, help="host memory per core")
    p.add_argument("--M-s", dest="M_s", type=float, default=4.0, help="service memory per core")
    p.add_argument("--alpha-m", dest="alpha_m", type=float, default=0.75)
    p.add_argument("--alpha-c", dest="alpha_c", type=float, default=0.9)
    p.add_argument("--factor", type=float, help="overcommit factor (default: the memory-safe maximum)")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.set_defaults(func=cmd_plan_overcommit)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ufa", description="Regional failover simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario")
    p.add_argument("scenario")
    _add_output_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("failback", help="run a scenario with an operator failback at a given time")
    p.add_argument("scenario")
    p.add_argument("--at", required=True, help="sim time, e.g. 3h or 10800000")
    _add_output_args(p)
    p.set_defaults(func=cmd_failback)

    p = sub.add_parser("drill", help="run a blackhole or failover certification drill")
    p.add_argument("kind", choices=("blackhole", "failover"))
    p.add_argument("spec")
    p.set_defaults(func=cmd_drill)

    deps = sub.add_parser("deps", help="dependency safety tooling")
    dsub = deps.add_subparsers(dest="deps_command", required=True)
    p = dsub.add_parser("analyze", help="classify edges from a JSONL trace")
    p.add_argument("trace")
    p.add_argument("--fleet", help="fleet JSON; when given, print the tier-inversion report")
    p.add_argument("--min-samples", type=int, default=20)
    p.add_argument("--fail-close", type=float, default=0.9)
    p.add_argument("--fail-open", type=float, default=0.1)
    p.set_defaults(func=cmd_deps_analyze)
    p = dsub.add_parser("trace", help="generate a synthetic JSONL trace for a fleet")
    p.add_argument("fleet")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--records", type=int, default=100_000)
    p.add_argument("--failure-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_deps_trace)
    p = dsub.add_parser("canary", help="canary gate for a dependency delta (exit 3 on rollback)")
    p.add_argument("fleet")
    p.add_argument("--deployment", help="JSON array of new edges")
    p.add_argument("--baseline", help="JSON object of baseline error rates")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_deps_canary)

    plan = sub.add_parser("plan", help="capacity planning")
    psub = plan.add_subparsers(dest="plan_command", required=True)
    _add_plan_args(psub.add_parser("overcommit", help="overcommit factor and per-host pools"))
    _add_plan_args(sub.add_parser("plan-overcommit", help="alias of 'plan overcommit'"))

    fl = sub.add_parser("fleet", help="fleet tooling")
    fsub = fl.add_subparsers(dest="fleet_command", required=True)
    p = fsub.add_parser("generate", help="generate a synthetic fleet JSON")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--scale", type=float, default=0.005)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fleet_generate)

    p = sub.add_parser("report", help="render a run directory")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("json", "table", "csv"), default="table")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="run every scenario in a directory")
    p.add_argument("dir")
    p.add_argument("--out", default="runs")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Unsatisfiable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
