import json
import subprocess
import sys

import pytest

from ufasim.cli import EXIT_CONFIG, EXIT_GATE, EXIT_OK, main
from ufasim.fleet import DependencyEdge, FailureClass, Fleet, Semantics, Service, Tier, generate_fleet


@pytest.fixture
def scenario_file(tmp_path, small_scenario):
    p = tmp_path / "small.json"
    p.write_text(json.dumps(small_scenario))
    return p


@pytest.fixture
def fleet_file(tmp_path):
    p = tmp_path / "fleet.json"
    p.write_text(generate_fleet(1, 0.002).dumps())
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_run_writes_report_and_event_log(capsys, tmp_path, scenario_file):
    code, out, _ = run(capsys, "run", scenario_file, "--out", tmp_path / "r", "--event-log", tmp_path / "ev.jsonl",
                       "--format", "json")
    assert code == EXIT_OK
    assert json.loads(out)["final_phase"] == "Steady"
    assert (tmp_path / "r" / "report.json").exists() and (tmp_path / "r" / "cores_by_class.csv").exists()
    first = json.loads((tmp_path / "ev.jsonl").read_text().splitlines()[0])
    assert set(first) == {"fire_at", "sequence", "kind", "payload"}


def test_config_errors_exit_2(capsys, tmp_path):
    code, _, err = run(capsys, "run", tmp_path / "missing.json")
    assert code == EXIT_CONFIG and "config error" in err
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "bogus": True, "events": []}))
    assert run(capsys, "run", bad)[0] == EXIT_CONFIG


def test_seed_env_var_reaches_the_run(capsys, tmp_path, scenario_file, monkeypatch):
    monkeypatch.setenv("UFA_SEED", "99")
    code, out, _ = run(capsys, "run", scenario_file, "--out", tmp_path / "r", "--format", "json")
    assert code == EXIT_OK and json.loads(out)["seed"] == 99


def test_failback_at_requires_prior_failover(capsys, tmp_path, scenario_file):
    code, out, _ = run(capsys, "failback", scenario_file, "--at", "2h", "--out", tmp_path / "r", "--format", "json")
    assert code == EXIT_OK
    phases = json.loads(out)["phases"]
    assert ["FailingBack", 2 * 3_600_000] in phases
    assert run(capsys, "failback", scenario_file, "--at", "30m")[0] == EXIT_CONFIG


def test_report_formats(capsys, tmp_path, scenario_file):
    run(capsys, "run", scenario_file, "--out", tmp_path / "r")
    code, out, _ = run(capsys, "report", tmp_path / "r", "--format", "csv")
    assert code == EXIT_OK and out.splitlines()[0] == "window_start,window_end,requests,ao_availability"
    code, out, _ = run(capsys, "report", tmp_path / "r", "--format", "table")
    assert "final phase" in out
    rep = tmp_path / "r" / "report.json"
    data = json.loads(rep.read_text())
    data["schema_version"] = 99
    rep.write_text(json.dumps(data))
    assert run(capsys, "report", tmp_path / "r")[0] == EXIT_CONFIG


def test_sweep(capsys, tmp_path, small_scenario):
    d = tmp_path / "scen"
    d.mkdir()
    small_scenario["events"] = []
    small_scenario["horizon"] = "30m"
    (d / "a.json").write_text(json.dumps(small_scenario))
    code, out, _ = run(capsys, "sweep", d, "--out", tmp_path / "runs")
    assert code == EXIT_OK
    rows = json.loads(out)
    assert rows[0]["final_phase"] == "Steady" and (tmp_path / "runs" / "a" / "report.json").exists()
    (d / "b.json").write_text("{}x")
    assert run(capsys, "sweep", d, "--out", tmp_path / "runs")[0] == EXIT_CONFIG


def test_deps_trace_and_analyze(capsys, tmp_path, fleet_file):
    trace = tmp_path / "t.jsonl"
    assert run(capsys, "deps", "trace", fleet_file, "-o", trace, "--records", 5000)[0] == EXIT_OK
    code, out, _ = run(capsys, "deps", "analyze", trace)
    rows = json.loads(out)
    assert code == EXIT_OK and rows and set(rows[0]) == {"edge", "semantics", "n", "k"}
    code, out, _ = run(capsys, "deps", "analyze", trace, "--fleet", fleet_file)
    assert code == EXIT_OK and isinstance(json.loads(out), list)


def _canary_fleet(tmp_path):
    svcs = {"ao": Service("ao", Tier.T1, FailureClass.ALWAYS_ON), "rl": Service("rl", Tier.T3,
                                                                               FailureClass.RESTORE_LATER)}
    p = tmp_path / "cf.json"
    p.write_text(Fleet(("A", "B"), services=svcs).dumps())
    return p


def test_deps_canary_gate(capsys, tmp_path):
    fleet = _canary_fleet(tmp_path)
    dep = tmp_path / "dep.json"
    dep.write_text(json.dumps([{"caller": ["ao", 0], "callee": ["rl", 0], "semantics": "FailClose"}]))
    code, out, _ = run(capsys, "deps", "canary", fleet, "--deployment", dep)
    assert code == EXIT_GATE and json.loads(out)["verdict"] == "Rollback"
    code, out, _ = run(capsys, "deps", "canary", fleet)
    assert code == EXIT_OK and json.loads(out)["verdict"] == "Pass"
    dep.write_text(json.dumps([{"caller": ["ao", 0], "callee": ["rl", 0], "semantics": "FailOpen"}]))
    assert run(capsys, "deps", "canary", fleet, "--deployment", dep)[0] == EXIT_OK


@pytest.mark.parametrize("cmd", [["plan", "overcommit"], ["plan-overcommit"]])
def test_plan_overcommit(capsys, fleet_file, cmd):
    code, out, _ = run(capsys, *cmd, fleet_file, "--factor", "1.5")
    data = json.loads(out)
    assert code == EXIT_OK
    assert data["factor"] == 1.5 and data["max_factor"] == pytest.approx(5 / 3)
    h = data["hosts"][0]
    assert h["overcommit"] == round(h["physical"] * 0.5 + 1e-9)
    code, out, _ = run(capsys, *cmd, fleet_file, "--format", "table")
    assert code == EXIT_OK and out.startswith("factor 1.6667")
    assert run(capsys, *cmd, fleet_file, "--factor", "2.0")[0] == EXIT_CONFIG


def test_fleet_generate_roundtrips(capsys, tmp_path):
    p = tmp_path / "f.json"
    assert run(capsys, "fleet", "generate", "-o", p, "--scale", 0.002, "--seed", 4)[0] == EXIT_OK
    doc = json.loads(p.read_text())
    assert doc["schema_version"] == 1 and Fleet.from_json(doc).services


def test_blackhole_drill_exit_codes(capsys, tmp_path, small_scenario):
    (tmp_path / "s.json").write_text(json.dumps(small_scenario))
    (tmp_path / "d.json").write_text(json.dumps({"scenario": "s.json", "samples_per_service": 20}))
    code, out, _ = run(capsys, "drill", "blackhole", tmp_path / "d.json")
    assert code == EXIT_OK and json.loads(out)["certified"]
    small_scenario["depsafety"] = {"inject_edges": [{"caller_class": "AlwaysOn", "callee_class": "RestoreLater"}]}
    (tmp_path / "s.json").write_text(json.dumps(small_scenario))
    code, out, _ = run(capsys, "drill", "blackhole", tmp_path / "d.json")
    assert code == EXIT_GATE and json.loads(out)["first_failing_step"] == 0.25
    (tmp_path / "d.json").write_text(json.dumps({"samples_per_service": 20}))
    assert run(capsys, "drill", "blackhole", tmp_path / "d.json")[0] == EXIT_CONFIG


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "ufasim.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "plan-overcommit" in res.stdout
