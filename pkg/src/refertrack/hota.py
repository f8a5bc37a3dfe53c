"""HOTA family of tracking metrics on image-plane boxes.

Follows the published HOTA definition: per frame, GT and predictions are
matched by an optimal assignment on IoU weighted by global alignment, then
each localization threshold alpha gates the true positives.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Rect2D, iou_2d

ALPHAS = np.arange(1, 20) * 0.05
_EPS = np.finfo(float).eps
METRIC_NAMES = ("hota", "deta", "detre", "detpr", "assa", "assre", "asspr", "loca")

Boxes = Mapping[int, Sequence[tuple[int, Rect2D]]]


class EvalError(ValueError):
    pass


@dataclass
class EvalResult:
    hota: float
    deta: float
    detre: float
    detpr: float
    assa: float
    assre: float
    asspr: float
    loca: float
    per_alpha: list[dict] = field(default_factory=list, repr=False)

    def row(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}


def _check_ids(boxes: Boxes, what: str) -> None:
    for frame, items in boxes.items():
        ids = [i for i, _ in items]
        if len(ids) != len(set(ids)):
            raise EvalError(f"duplicate {what} ids in frame {frame}")


def _iou_matrix(g: Sequence[Rect2D], p: Sequence[Rect2D]) -> np.ndarray:
    m = np.zeros((len(g), len(p)))
    for i, a in enumerate(g):
        for j, b in enumerate(p):
            m[i, j] = iou_2d(a, b)
    return m


def _summarize(tp, fn, fp, ass_a, ass_re, ass_pr, loca) -> dict[str, float]:
    det_re = tp / max(1.0, tp + fn)
    det_pr = tp / max(1.0, tp + fp)
    det_a = tp / max(1.0, tp + fn + fp)
    return {
        "hota": math.sqrt(det_a * ass_a),
        "deta": det_a,
        "detre": det_re,
        "detpr": det_pr,
        "assa": ass_a,
        "assre": ass_re,
        "asspr": ass_pr,
        "loca": loca,
    }


def evaluate(gt: Boxes, pred: Boxes) -> EvalResult:
    _check_ids(gt, "ground-truth")
    _check_ids(pred, "prediction")
    frames = sorted(set(gt) | set(pred))
    gt_ids = sorted({i for f in frames for i, _ in gt.get(f, ())})
    pr_ids = sorted({i for f in frames for i, _ in pred.get(f, ())})
    gidx = {v: k for k, v in enumerate(gt_ids)}
    pidx = {v: k for k, v in enumerate(pr_ids)}
    n_gt = sum(len(gt.get(f, ())) for f in frames)
    n_pr = sum(len(pred.get(f, ())) for f in frames)
    n_alpha = len(ALPHAS)

    if n_gt == 0 or n_pr == 0:
        per = [
            {"alpha": float(a), **_summarize(0.0, float(n_gt), float(n_pr), 0.0, 0.0, 0.0, 1.0)}
            for a in ALPHAS
        ]
        return _average(per)

    # Pass 1: global alignment between every gt id and pred id.
    potential = np.zeros((len(gt_ids), len(pr_ids)))
    gt_count = np.zeros(len(gt_ids))
    pr_count = np.zeros(len(pr_ids))
    per_frame = []
    for f in frames:
        g = gt.get(f, ())
        p = pred.get(f, ())
        gi = np.array([gidx[i] for i, _ in g], dtype=int)
        pi = np.array([pidx[i] for i, _ in p], dtype=int)
        sim = _iou_matrix([r for _, r in g], [r for _, r in p])
        per_frame.append((gi, pi, sim))
        gt_count[gi] += 1
        pr_count[pi] += 1
        if sim.size:
            denom = sim.sum(0)[None, :] + sim.sum(1)[:, None] - sim
            sim_iou = np.zeros_like(sim)
            ok = denom > _EPS
            sim_iou[ok] = sim[ok] / denom[ok]
            potential[gi[:, None], pi[None, :]] += sim_iou
    alignment = potential / (gt_count[:, None] + pr_count[None, :] - potential)

    # Pass 2: per-frame optimal matching, gated per alpha.
    matches = np.zeros((n_alpha, len(gt_ids), len(pr_ids)))
    tp = np.zeros(n_alpha)
    loc_sum = np.zeros(n_alpha)
    for gi, pi, sim in per_frame:
        if sim.size == 0:
            continue
        score = alignment[gi[:, None], pi[None, :]] * sim
        rows, cols = linear_sum_assignment(-score)
        for a, alpha in enumerate(ALPHAS):
            ok = sim[rows, cols] >= alpha - _EPS
            r, c = rows[ok], cols[ok]
            tp[a] += len(r)
            loc_sum[a] += sim[r, c].sum()
            matches[a, gi[r], pi[c]] += 1

    per = []
    for a, alpha in enumerate(ALPHAS):
        m = matches[a]
        fn = n_gt - tp[a]
        fp = n_pr - tp[a]
        if tp[a] > 0:
            ass = m / np.maximum(1.0, gt_count[:, None] + pr_count[None, :] - m)
            ass_a = float((m * ass).sum() / tp[a])
            ass_re = float((m * m / np.maximum(1.0, gt_count[:, None])).sum() / tp[a])
            ass_pr = float((m * m / np.maximum(1.0, pr_count[None, :])).sum() / tp[a])
            loca = float(loc_sum[a] / tp[a])
        else:
            ass_a = ass_re = ass_pr = 0.0
            loca = 1.0
        per.append({"alpha": float(alpha), **_summarize(tp[a], fn, fp, ass_a, ass_re, ass_pr, loca)})
    return _average(per)


def _average(per: list[dict]) -> EvalResult:
    means = {name: float(np.mean([row[name] for row in per])) for name in METRIC_NAMES}
    return EvalResult(**means, per_alpha=per)


# -- result files and suites ---------------------------------------------------


def boxes_from_rows(rows, query_id: str | None = None) -> dict[int, list[tuple[int, Rect2D]]]:
    out: dict[int, list[tuple[int, Rect2D]]] = {}
    for r in rows:
        if query_id is not None and r["query_id"] != query_id:
            continue
        out.setdefault(r["frame"], []).append((r["track_id"], Rect2D(*r["rect"])))
    return out


def evaluate_suite(
    query_ids: Sequence[str],
    results: Mapping[str, Boxes | None],
    gt: Mapping[str, Boxes],
) -> tuple[dict[str, EvalResult], dict[str, float]]:
    """Per-query evaluation and the arithmetic mean across queries.

    A query without predictions is scored as an empty prediction set.
    """
    if not query_ids:
        raise EvalError("no queries to evaluate")
    per_query = {}
    for qid in query_ids:
        pred = results.get(qid) or {}
        per_query[qid] = evaluate(gt.get(qid, {}), pred)
    mean = {
        name: float(np.mean([per_query[q].row()[name] for q in query_ids])) for name in METRIC_NAMES
    }
    return per_query, mean


def evaluate_files(query_ids: Sequence[str], results_dir, gt_path):
    from .ingest import read_result_rows

    gt_rows = read_result_rows(gt_path)
    gt = {q: boxes_from_rows(gt_rows, q) for q in query_ids}
    results = {}
    for q in query_ids:
        path = Path(results_dir) / f"{q}.csv"
        results[q] = boxes_from_rows(read_result_rows(path)) if path.exists() else None
    return evaluate_suite(query_ids, results, gt)


def format_table_csv(per_query: Mapping[str, EvalResult], mean: Mapping[str, float]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", *(n.upper() for n in METRIC_NAMES)])
    for q in sorted(per_query):
        w.writerow([q, *(f"{100 * per_query[q].row()[n]:.2f}" for n in METRIC_NAMES)])
    w.writerow(["MEAN", *(f"{100 * mean[n]:.2f}" for n in METRIC_NAMES)])
    return buf.getvalue()


def format_table_text(per_query: Mapping[str, EvalResult], mean: Mapping[str, float]) -> str:
    headers = ["query", "HOTA", "DetA", "DetRe", "DetPr", "AssA", "AssRe", "AssPr", "LocA"]
    order = ["hota", "deta", "detre", "detpr", "assa", "assre", "asspr", "loca"]
    rows = [[q, *(f"{100 * per_query[q].row()[n]:.2f}" for n in order)] for q in sorted(per_query)]
    rows.append(["MEAN", *(f"{100 * mean[n]:.2f}" for n in order)])
    widths = [max(len(str(r[i])) for r in rows + [headers]) for i in range(len(headers))]
    lines = ["  ".join(h.rjust(w) if i else h.ljust(w) for i, (h, w) in enumerate(zip(headers, widths)))]
    for r in rows:
        lines.append("  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"
