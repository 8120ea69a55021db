"""Trace-driven fail-close detection, tier-inversion discovery, off-boarding and the canary gate."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .fleet import DependencyEdge, EdgeKey, FailureClass, Fleet, Semantics, inversion_category
from .simkernel import MINUTE, SECOND, SeededRng
from .traffic import GraphState, evaluate_request

log = logging.getLogger(__name__)


class MixedEdge(ValueError):
    pass


class NoBaseline(ValueError):
    pass


@dataclass(frozen=True)
class TraceRecord:
    timestamp: int
    caller: Tuple[str, int]
    callee: Tuple[str, int]
    callee_failed: bool
    caller_failed: bool

    @property
    def edge(self) -> EdgeKey:
        return EdgeKey(self.caller[0], int(self.caller[1]), self.callee[0], int(self.callee[1]))

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "caller": list(self.caller), "callee": list(self.callee),
                "callee_failed": self.callee_failed, "caller_failed": self.caller_failed}

    @classmethod
    def from_json(cls, d: Mapping) -> "TraceRecord":
        return cls(int(d["timestamp"]), (str(d["caller"][0]), int(d["caller"][1])),
                   (str(d["callee"][0]), int(d["callee"][1])),
                   bool(d["callee_failed"]), bool(d["caller_failed"]))


def write_trace(path, records: Iterable[TraceRecord]) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
            n += 1
    return n


def read_trace(path) -> Iterator[TraceRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield TraceRecord.from_json(json.loads(line))
            except (KeyError, ValueError, TypeError, IndexError) as exc:
                raise ValueError(f"{path}:{lineno}: bad trace record: {exc}") from exc


@dataclass(frozen=True)
class ClassifierConfig:
    min_samples: int = 20
    fail_close_threshold: float = 0.9
    fail_open_threshold: float = 0.1

    def __post_init__(self):
        if self.min_samples < 1:
            raise ValueError("min_samples must be >= 1")
        if not 0 <= self.fail_open_threshold < self.fail_close_threshold <= 1:
            raise ValueError("need 0 <= fail_open_threshold < fail_close_threshold <= 1")


def classify_counts(n: int, k: int, cfg: ClassifierConfig = ClassifierConfig()) -> Semantics:
    """n = callee failures seen, k = those where the caller failed too."""
    if n < cfg.min_samples:
        return Semantics.INDETERMINATE
    ratio = k / n
    if ratio >= cfg.fail_close_threshold:
        return Semantics.FAIL_CLOSE
    if ratio <= cfg.fail_open_threshold:
        return Semantics.FAIL_OPEN
    return Semantics.INDETERMINATE


def edge_counts(trace: Iterable[TraceRecord]) -> Dict[EdgeKey, List[int]]:
    """Per-edge [n, k] evidence counts."""
    counts: Dict[EdgeKey, List[int]] = {}
    for r in trace:
        c = counts.get(r.edge)
        if c is None:
            c = counts[r.edge] = [0, 0]
        if r.callee_failed:
            c[0] += 1
            if r.caller_failed:
                c[1] += 1
    return counts


def classify_dependency(records: Iterable[TraceRecord], cfg: ClassifierConfig = ClassifierConfig()) -> Semantics:
    counts = edge_counts(records)
    if len(counts) > 1:
        raise MixedEdge(f"records span {len(counts)} edges")
    if not counts:
        return Semantics.INDETERMINATE
    n, k = next(iter(counts.values()))
    return classify_counts(n, k, cfg)


def analyze_trace(trace: Iterable[TraceRecord], cfg: ClassifierConfig = ClassifierConfig()) -> Dict[EdgeKey, Semantics]:
    return {e: classify_counts(n, k, cfg) for e, (n, k) in sorted(edge_counts(trace).items())}


class DependencyClassifier(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around the fail-close rule.

    ``fit`` takes trace records and accumulates per-edge evidence; ``predict``
    takes edge keys (or records, whose edge is used) and returns semantics
    labels as strings.  Edges never seen in training predict Indeterminate.
    """

    def __init__(self, min_samples: int = 20, fail_close_threshold: float = 0.9,
                 fail_open_threshold: float = 0.1):
        self.min_samples = min_samples
        self.fail_close_threshold = fail_close_threshold
        self.fail_open_threshold = fail_open_threshold

    def _config(self) -> ClassifierConfig:
        return ClassifierConfig(self.min_samples, self.fail_close_threshold, self.fail_open_threshold)

    def fit(self, X, y=None):
        cfg = self._config()
        self.counts_ = edge_counts(X)
        self.semantics_ = {e: classify_counts(n, k, cfg) for e, (n, k) in self.counts_.items()}
        self.classes_ = np.array([s.value for s in Semantics])
        self.n_edges_ = len(self.counts_)
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "semantics_"):
            raise RuntimeError("DependencyClassifier is not fitted")
        out = []
        for item in X:
            key = item.edge if isinstance(item, TraceRecord) else EdgeKey(*item)
            out.append(self.semantics_.get(key, Semantics.INDETERMINATE).value)
        return np.array(out, dtype=object)


def score_against_truth(predicted: Mapping[EdgeKey, Semantics], fleet: Fleet,
                        counts: Optional[Mapping[EdgeKey, Sequence[int]]] = None,
                        min_samples: int = 0) -> Tuple[float, float, int]:
    """Precision and recall of FailClose predictions against edge ground truth.

    Only edges with at least ``min_samples`` callee failures are scored when
    ``counts`` is given.  Indeterminate counts as a negative prediction.
    Returns (precision, recall, edges scored).
    """
    truth = {e.key: e.ground_truth for e in fleet.edges}
    tp = fp = fn = scored = 0
    for key, sem in predicted.items():
        if key not in truth:
            continue
        if counts is not None and counts[key][0] < min_samples:
            continue
        scored += 1
        pos_pred = sem is Semantics.FAIL_CLOSE
        pos_true = truth[key] is Semantics.FAIL_CLOSE
        tp += pos_pred and pos_true
        fp += pos_pred and not pos_true
        fn += pos_true and not pos_pred
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fn else 1.0
    return precision, recall, scored


# ---------------------------------------------------------------------------
# tier inversions
# ---------------------------------------------------------------------------

DETECTORS = ("runtime", "canary", "drill")


@dataclass
class Violation:
    edge: EdgeKey
    category: str
    detected_by: str = "runtime"
    n: int = 0
    k: int = 0

    def to_json(self) -> dict:
        return {"edge": {"caller": [self.edge.caller, self.edge.caller_ep],
                         "callee": [self.edge.callee, self.edge.callee_ep]},
                "category": self.category, "detected_by": self.detected_by,
                "evidence": {"n": self.n, "k": self.k}}


def find_tier_inversions(fleet: Fleet, semantics: Mapping[EdgeKey, Semantics], detected_by: str = "runtime",
                         counts: Optional[Mapping[EdgeKey, Sequence[int]]] = None) -> List[Violation]:
    if detected_by not in DETECTORS:
        raise ValueError(f"unknown detector {detected_by!r}")
    out = []
    for key in sorted(semantics):
        if semantics[key] is not Semantics.FAIL_CLOSE:
            continue
        if key.caller not in fleet.services or key.callee not in fleet.services:
            continue
        caller_cls, callee_cls = fleet.class_of(key.caller), fleet.class_of(key.callee)
        if not caller_cls.critical:
            continue
        cat = inversion_category(caller_cls, callee_cls)
        if cat is None:
            continue
        n, k = counts[key] if counts is not None and key in counts else (0, 0)
        out.append(Violation(key, cat, detected_by, n, k))
    return out


def violation_report(violations: Iterable[Violation]) -> str:
    return json.dumps([v.to_json() for v in violations], indent=1, sort_keys=True)


def offboard_violations(fleet: Fleet, violations: Iterable[Violation]) -> Set[str]:
    """Callee services excluded from failover termination."""
    return {v.edge.callee for v in violations if v.edge.callee in fleet.services}


# ---------------------------------------------------------------------------
# canary regression gate
# ---------------------------------------------------------------------------

PASS = "Pass"
ROLLBACK = "Rollback"


@dataclass(frozen=True)
class RegressionConfig:
    relative_increase: float = 0.5
    absolute_floor: float = 0.001     # 0.1 percentage points


@dataclass
class CanaryVerdict:
    verdict: str
    error_rates: Dict[str, float]
    regressions: List[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"verdict": self.verdict, "regressions": self.regressions,
                "error_rates": dict(sorted(self.error_rates.items()))}


def is_regression(rate: float, base: float, cfg: RegressionConfig = RegressionConfig()) -> bool:
    return rate > base * (1.0 + cfg.relative_increase) and rate - base > cfg.absolute_floor


def _with_delta(fleet: Fleet, deployment: Sequence[DependencyEdge]) -> Fleet:
    """Shallow copy of the fleet whose edge list carries the deployment's edges."""
    g = Fleet(fleet.regions, fleet.zones, fleet.services, fleet.environments,
              list(fleet.edges), fleet.clusters, fleet.hosts, fleet.cities)
    index = {e.key: i for i, e in enumerate(g.edges)}
    for e in deployment:
        if e.key in index:
            g.edges[index[e.key]] = e
        else:
            index[e.key] = len(g.edges)
            g.edges.append(e)
    g.reindex()
    return g


def canary_window_error_rates(fleet: Fleet, deployment: Sequence[DependencyEdge] = (), window: int = 5 * MINUTE,
                              seed: int = 0, samples_per_service: int = 200,
                              convergence: int = 30 * SECOND, exempt: Iterable[str] = ()) -> Dict[str, float]:
    """Caller error rates of AO/AM services in the canary zone during an isolation window.

    Every RestoreLater and Terminate service is blocked for ``window``, ramping
    in over ``convergence``.  Requests are spread evenly over the window.
    """
    g = _with_delta(fleet, deployment)
    exempt = set(exempt)
    blockable = [s for s, svc in g.services.items()
                 if svc.failure_class.preemptible and s not in exempt]
    rng = SeededRng(seed).child("canary").generator
    roots = sorted(s for s, svc in g.services.items() if svc.failure_class.critical)
    rates: Dict[str, float] = {}
    for sid in roots:
        fails = 0
        for i in range(samples_per_service):
            t = (i * window) // samples_per_service
            frac = 1.0 if convergence <= 0 else min(1.0, t / convergence)
            state = GraphState(blocked={s: frac for s in blockable})
            if not evaluate_request(g, sid, state, rng).success:
                fails += 1
        rates[sid] = fails / samples_per_service
    return rates


def canary_gate(fleet: Fleet, deployment: Sequence[DependencyEdge], baseline: Optional[Mapping[str, float]],
                regression_cfg: RegressionConfig = RegressionConfig(), window: int = 5 * MINUTE,
                seed: int = 0, samples_per_service: int = 200, exempt: Iterable[str] = ()) -> CanaryVerdict:
    """Run the isolation window with ``deployment`` active and compare to ``baseline``.

    ``baseline`` maps AO/AM service id to its error rate under the same window
    without the deployment (see :func:`canary_window_error_rates`).
    """
    if not baseline:
        raise NoBaseline("canary gate needs baseline error rates")
    rates = canary_window_error_rates(fleet, deployment, window, seed, samples_per_service, exempt=exempt)
    regressions = [sid for sid, r in sorted(rates.items())
                   if is_regression(r, baseline.get(sid, 0.0), regression_cfg)]
    return CanaryVerdict(ROLLBACK if regressions else PASS, rates, regressions)
