import json
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ufasim.depsafety import (PASS, ROLLBACK, ClassifierConfig, DependencyClassifier, MixedEdge, NoBaseline,
                              RegressionConfig, TraceRecord, analyze_trace, canary_gate, canary_window_error_rates,
                              classify_counts, classify_dependency, edge_counts, find_tier_inversions,
                              is_regression, offboard_violations, read_trace, score_against_truth,
                              violation_report, write_trace)
from ufasim.fleet import DependencyEdge, EdgeKey, FailureClass, Fleet, Semantics, Service, Tier, generate_fleet
from ufasim.traffic import generate_workload

FC, FO, IND = Semantics.FAIL_CLOSE, Semantics.FAIL_OPEN, Semantics.INDETERMINATE


def rec(caller="a", callee="b", callee_failed=True, caller_failed=True, t=0):
    return TraceRecord(t, (caller, 0), (callee, 0), callee_failed, caller_failed)


def tiny_fleet(*edges):
    svcs = {
        "ao": Service("ao", Tier.T1, FailureClass.ALWAYS_ON),
        "ao2": Service("ao2", Tier.T0, FailureClass.ALWAYS_ON),
        "am": Service("am", Tier.T2, FailureClass.ACTIVE_MIGRATE),
        "rl": Service("rl", Tier.T3, FailureClass.RESTORE_LATER),
        "rl2": Service("rl2", Tier.T4, FailureClass.RESTORE_LATER),
        "t": Service("t", Tier.NP, FailureClass.TERMINATE),
    }
    return Fleet(("r1", "r2"), services=svcs, edges=list(edges))


def edge(a, b, gt=FO):
    return DependencyEdge((a, 0), (b, 0), ground_truth=gt)


# --- classification --------------------------------------------------------

@pytest.mark.parametrize("n,k,sem", [(100, 100, FC), (100, 0, FO), (100, 50, IND), (19, 19, IND), (20, 18, FC),
                                     (20, 2, FO)])
def test_classify_counts(n, k, sem):
    assert classify_counts(n, k) is sem


def test_classify_dependency_from_records():
    recs = [rec() for _ in range(30)] + [rec(callee_failed=False, caller_failed=True)]
    assert classify_dependency(recs) is FC
    assert classify_dependency([]) is IND
    with pytest.raises(MixedEdge):
        classify_dependency([rec(), rec(callee="c")])


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 200), st.data())
def test_classification_monotone_in_k(n, data):
    k1 = data.draw(st.integers(0, n))
    k2 = data.draw(st.integers(k1, n))
    order = {FO: 0, IND: 1, FC: 2}
    cfg = ClassifierConfig(min_samples=1)
    assert order[classify_counts(n, k1, cfg)] <= order[classify_counts(n, k2, cfg)] or \
        classify_counts(n, k2, cfg) is IND and classify_counts(n, k1, cfg) is IND


def test_classifier_config_validated():
    with pytest.raises(ValueError):
        ClassifierConfig(min_samples=0)
    with pytest.raises(ValueError):
        ClassifierConfig(fail_close_threshold=0.1, fail_open_threshold=0.1)


def test_analyze_trace_covers_exactly_present_edges():
    assert analyze_trace([]) == {}
    out = analyze_trace([rec("a", "b")] * 25 + [rec("a", "c", caller_failed=False)] * 25)
    assert out == {EdgeKey("a", 0, "b", 0): FC, EdgeKey("a", 0, "c", 0): FO}


def test_trace_jsonl_roundtrip(tmp_path):
    recs = [rec(t=i, caller_failed=bool(i % 2)) for i in range(5)]
    path = tmp_path / "trace.jsonl"
    assert write_trace(path, recs) == 5
    assert list(read_trace(path)) == recs
    path.write_text('{"timestamp": 1}\n')
    with pytest.raises(ValueError, match="trace.jsonl:1"):
        list(read_trace(path))


def _scored(flip):
    fleet = generate_fleet(3, 0.002)
    wl = generate_workload(fleet, 5, 3_600_000, 100_000, n_roots=0, callee_failure_rate=0.5,
                           flip_noise=flip, edge_sampling="uniform")
    counts = edge_counts(wl.trace)
    pred = analyze_trace(wl.trace)
    return score_against_truth(pred, fleet, counts, min_samples=20), fleet, pred, counts


def test_noiseless_trace_recovers_ground_truth():
    (precision, recall, scored), fleet, pred, counts = _scored(0.0)
    assert scored > 0 and precision == recall == 1.0
    truth = {e.key: e.ground_truth for e in fleet.edges}
    for key, sem in pred.items():
        if counts[key][0] >= 20:
            assert sem is truth[key]


def test_five_percent_flip_noise_stays_above_095():
    (precision, recall, _), *_ = _scored(0.05)
    assert precision >= 0.95 and recall >= 0.95


def test_sklearn_estimator_shape():
    recs = [rec("a", "b")] * 25 + [rec("a", "c", caller_failed=False)] * 25
    clf = DependencyClassifier().fit(recs)
    assert list(clf.predict([("a", 0, "b", 0), ("a", 0, "c", 0), ("x", 0, "y", 0)])) == \
        ["FailClose", "FailOpen", "Indeterminate"]
    assert clf.predict([recs[0]])[0] == "FailClose"
    assert clf.get_params()["min_samples"] == 20
    assert set(clf.classes_) == {"FailOpen", "FailClose", "Indeterminate"}
    with pytest.raises(RuntimeError):
        DependencyClassifier().predict([("a", 0, "b", 0)])
    strict = DependencyClassifier().set_params(min_samples=100).fit(recs)
    assert strict.predict([("a", 0, "b", 0)])[0] == "Indeterminate"


# --- tier inversions -------------------------------------------------------

@pytest.mark.parametrize("a,b,sem,cat", [
    ("ao", "rl", FC, "AO->RL"), ("am", "rl", FC, "AM->RL"), ("ao", "t", FC, "any->T"), ("am", "t", FC, "any->T"),
    ("ao", "rl", FO, None), ("rl", "rl2", FC, None), ("rl", "t", FC, None), ("ao", "am", FC, None),
])
def test_find_tier_inversions_cases(a, b, sem, cat):
    fleet = tiny_fleet(edge(a, b))
    found = find_tier_inversions(fleet, {EdgeKey(a, 0, b, 0): sem})
    assert [v.category for v in found] == ([cat] if cat else [])


def test_find_tier_inversions_matches_brute_force_scan():
    fleet = generate_fleet(8, 0.003)
    sem = {e.key: e.ground_truth for e in fleet.edges}
    expected = set()
    for e in fleet.edges:
        ccls, kcls = fleet.class_of(e.caller[0]), fleet.class_of(e.callee[0])
        if sem[e.key] is FC and ccls in (FailureClass.ALWAYS_ON, FailureClass.ACTIVE_MIGRATE) \
                and kcls in (FailureClass.RESTORE_LATER, FailureClass.TERMINATE):
            expected.add(e.key)
    assert {v.edge for v in find_tier_inversions(fleet, sem)} == expected


def test_violation_report_and_offboarding():
    fleet = tiny_fleet(edge("ao", "rl"), edge("am", "rl"))
    sem = {EdgeKey("ao", 0, "rl", 0): FC, EdgeKey("am", 0, "rl", 0): FC}
    vs = find_tier_inversions(fleet, sem, detected_by="canary", counts={EdgeKey("ao", 0, "rl", 0): (40, 39)})
    doc = json.loads(violation_report(vs))
    by_caller = {d["edge"]["caller"][0]: d for d in doc}
    assert by_caller["ao"]["evidence"] == {"n": 40, "k": 39} and by_caller["ao"]["category"] == "AO->RL"
    assert by_caller["am"]["evidence"] == {"n": 0, "k": 0} and by_caller["am"]["detected_by"] == "canary"
    assert offboard_violations(fleet, vs) == {"rl"}
    assert offboard_violations(fleet, []) == set()
    with pytest.raises(ValueError):
        find_tier_inversions(fleet, sem, detected_by="oracle")


# --- canary gate -----------------------------------------------------------

def test_regression_needs_both_relative_and_absolute_jump():
    assert is_regression(0.10, 0.05)
    assert not is_regression(0.0005, 0.0)          # under the 0.1 pp floor
    assert not is_regression(0.07, 0.05)           # under +50 %
    assert is_regression(0.01, 0.0, RegressionConfig())


def test_canary_gate_verdicts():
    fleet = tiny_fleet(edge("ao", "ao2"), edge("am", "rl", FO))
    baseline = canary_window_error_rates(fleet)
    assert set(baseline) == {"ao", "ao2", "am"}
    assert canary_gate(fleet, [], baseline).verdict == PASS
    assert canary_gate(fleet, [edge("ao", "rl", FO)], baseline).verdict == PASS
    verdict = canary_gate(fleet, [edge("ao", "rl", FC)], baseline)
    assert verdict.verdict == ROLLBACK and verdict.regressions == ["ao"]
    # off-boarded callees are never blocked, so the same deployment passes
    assert canary_gate(fleet, [edge("ao", "rl", FC)], baseline, exempt={"rl"}).verdict == PASS
    with pytest.raises(NoBaseline):
        canary_gate(fleet, [], {})


def test_canary_gate_does_not_mutate_fleet():
    fleet = tiny_fleet(edge("ao", "ao2"))
    baseline = canary_window_error_rates(fleet)
    canary_gate(fleet, [edge("ao", "rl", FC)], baseline)
    assert [e.key for e in fleet.edges] == [EdgeKey("ao", 0, "ao2", 0)]


def test_analyze_hundred_thousand_records_quickly():
    fleet = generate_fleet(3, 0.002)
    wl = generate_workload(fleet, 1, 3_600_000, 100_000, n_roots=0)
    t0 = time.perf_counter()
    analyze_trace(wl.trace)
    assert time.perf_counter() - t0 < 10
    assert isinstance(DependencyClassifier().fit(wl.trace).predict(list(edge_counts(wl.trace))[:3]), np.ndarray)
