"""Turn per-detection match scores into the set of trajectories that answer a query.

Modes:
    threshold     fixed cut on the fused score
    cluster       two-cluster agglomerative split (average linkage) of the scores
    cluster+mv    cluster, then lift labels to whole trajectories by majority vote
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

MODES = ("threshold", "cluster", "cluster+mv")
MATCHED, UNMATCHED, UNDECIDED = "matched", "unmatched", "undecided"


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class ScoredDetection:
    track_id: int
    frame: int
    s_total: float
    label: str = UNDECIDED


@dataclass
class SelectionConfig:
    mode: str = "cluster+mv"
    threshold: float | None = None
    # Per-query quantile of the scores used as the threshold when set.
    threshold_quantile: float | None = None
    min_spread: float = 1e-6
    linkage: str = "average"
    tie_policy: str = MATCHED

    def validate(self) -> None:
        if self.mode not in MODES:
            raise SelectionError(f"unknown selection mode {self.mode!r}; expected one of {MODES}")
        if self.linkage != "average":
            raise SelectionError("only average linkage is supported")
        if self.tie_policy not in (MATCHED, UNMATCHED):
            raise SelectionError(f"unknown tie policy {self.tie_policy!r}")
        if self.mode == "threshold":
            if self.threshold_quantile is not None:
                if not 0.0 <= self.threshold_quantile <= 1.0:
                    raise SelectionError("threshold_quantile must be in [0, 1]")
            elif self.threshold is None or not math.isfinite(self.threshold):
                raise SelectionError("threshold mode needs a finite threshold")


def _relabel(scored: Sequence[ScoredDetection], matched: Iterable[bool]) -> list[ScoredDetection]:
    return [replace(s, label=MATCHED if m else UNMATCHED) for s, m in zip(scored, matched)]


def threshold_select(scored: Sequence[ScoredDetection], tau: float) -> list[ScoredDetection]:
    return _relabel(scored, (s.s_total >= tau for s in scored))


def two_cluster_split(values: Sequence[float]) -> np.ndarray:
    """Boolean mask of the upper cluster when average-linkage agglomeration stops at two.

    On a line, average linkage between two disjoint intervals equals the
    gap between their means, so clusters stay contiguous in sorted order
    and only neighbouring clusters ever merge. Ties merge the leftmost pair.
    """
    x = np.asarray(values, dtype=float)
    n = len(x)
    if n < 2:
        return np.ones(n, dtype=bool)
    order = np.argsort(x, kind="stable")
    sums = x[order].copy()
    sizes = np.ones(n)
    starts = list(range(n))
    while len(sums) > 2:
        means = sums / sizes
        k = int(np.argmin(np.diff(means)))
        sums[k] += sums[k + 1]
        sizes[k] += sizes[k + 1]
        sums = np.delete(sums, k + 1)
        sizes = np.delete(sizes, k + 1)
        del starts[k + 1]
    upper = np.zeros(n, dtype=bool)
    upper[order[starts[1]:]] = True
    return upper


def cluster_select(scored: Sequence[ScoredDetection], min_spread: float = 1e-6) -> list[ScoredDetection]:
    if not scored:
        return []
    # Stable (track_id, frame) order makes ties deterministic.
    idx = sorted(range(len(scored)), key=lambda i: (scored[i].track_id, scored[i].frame))
    values = np.array([scored[i].s_total for i in idx])
    if len(values) == 1 or values.max() - values.min() < min_spread:
        return _relabel(scored, [True] * len(scored))
    upper = two_cluster_split(values)
    matched = [False] * len(scored)
    for pos, i in enumerate(idx):
        matched[i] = bool(upper[pos])
    return _relabel(scored, matched)


def majority_vote(
    labeled: Sequence[ScoredDetection], trajectories: Iterable[int], tie_policy: str = MATCHED
) -> list[ScoredDetection]:
    known = set(trajectories)
    votes: dict[int, Counter] = {}
    for s in labeled:
        if s.track_id not in known:
            raise SelectionError(f"detection refers to unknown track {s.track_id}")
        if s.label == UNDECIDED:
            raise SelectionError("majority vote needs every detection labeled first")
        votes.setdefault(s.track_id, Counter())[s.label] += 1
    verdict = {}
    for tid, c in votes.items():
        if c[MATCHED] == c[UNMATCHED]:
            verdict[tid] = tie_policy == MATCHED
        else:
            verdict[tid] = c[MATCHED] > c[UNMATCHED]
    return _relabel(labeled, (verdict[s.track_id] for s in labeled))


@dataclass
class SelectionResult:
    labeled: list[ScoredDetection]
    report: dict = field(default_factory=dict)

    @property
    def matched(self) -> list[ScoredDetection]:
        return [s for s in self.labeled if s.label == MATCHED]


def resolve_threshold(scored: Sequence[ScoredDetection], config: SelectionConfig) -> float | None:
    if config.threshold_quantile is not None and scored:
        return float(np.quantile([s.s_total for s in scored], config.threshold_quantile))
    return config.threshold


def select(
    scored: Sequence[ScoredDetection], trajectories: Iterable[int], config: SelectionConfig
) -> SelectionResult:
    config.validate()
    scored = sorted(scored, key=lambda s: (s.track_id, s.frame))
    tau = None
    if config.mode == "threshold":
        tau = resolve_threshold(scored, config)
        labeled = threshold_select(scored, tau if tau is not None else math.inf)
    else:
        labeled = cluster_select(scored, config.min_spread)
        if config.mode == "cluster+mv":
            labeled = majority_vote(labeled, trajectories, config.tie_policy)

    scores = np.array([s.s_total for s in scored])
    if len(scores):
        counts, edges = np.histogram(scores, bins=10)
        hist = {"counts": counts.tolist(), "edges": [round(float(e), 6) for e in edges]}
    else:
        hist = {"counts": [], "edges": []}
    n_matched = sum(1 for s in labeled if s.label == MATCHED)
    report = {
        "mode": config.mode,
        "threshold": tau,
        "detections": len(labeled),
        "matched": n_matched,
        "unmatched": len(labeled) - n_matched,
        "histogram": hist,
        "selected_tracks": sorted({s.track_id for s in labeled if s.label == MATCHED}),
    }
    return SelectionResult(labeled, report)
