"""Independent reference implementations used to check the library.

Each oracle takes a different computational route from the code under
test: a full common-suffix table for gestalt matching, exhaustive
partition enumeration for the 2-cluster split, and brute-force matching
enumeration for HOTA.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


# -- gestalt (Ratcliff/Obershelp) -----------------------------------------------


def gestalt_matches_dp(a: str, b: str) -> int:
    if not a or not b:
        return 0
    # suffix[i][j] = length of the common suffix of a[:i] and b[:j]
    suffix = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                suffix[i][j] = suffix[i - 1][j - 1] + 1
    best, bi, bj = 0, 0, 0
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            k = suffix[i][j]
            if k == 0:
                continue
            si, sj = i - k, j - k
            # longest first, then earliest start in a, then earliest in b
            if k > best or (k == best and (si, sj) < (bi, bj)):
                best, bi, bj = k, si, sj
    if best == 0:
        return 0
    return best + gestalt_matches_dp(a[:bi], b[:bj]) + gestalt_matches_dp(a[bi + best:], b[bj + best:])


def gestalt_ratio_dp(a: str, b: str) -> float:
    if not a and not b:
        return 1.0
    return 2.0 * gestalt_matches_dp(a, b) / (len(a) + len(b))


# -- average-linkage two-cluster split -------------------------------------------


def _avg(x, c1, c2):
    return sum(abs(x[i] - x[j]) for i in c1 for j in c2) / (len(c1) * len(c2))


def _merge_sequence(x, members):
    """Generic average linkage inside ``members``; returns [(height, clusters_after)]."""
    clusters = [frozenset([m]) for m in members]
    steps = [(0.0, list(clusters))]
    while len(clusters) > 1:
        best = None
        for i, j in itertools.combinations(range(len(clusters)), 2):
            d = _avg(x, clusters[i], clusters[j])
            if best is None or d < best[0]:
                best = (d, i, j)
        d, i, j = best
        merged = clusters[i] | clusters[j]
        clusters = [c for k, c in enumerate(clusters) if k not in (i, j)] + [merged]
        steps.append((d, list(clusters)))
    return steps


def _is_top_split(x, A, B) -> bool:
    """True iff greedy average linkage on A∪B ends with exactly A and B.

    Runs linkage inside A and inside B separately and replays the merges in
    height order; the split is reachable iff no cross pair is ever closer
    than the next within-part merge.
    """
    sa, sb = _merge_sequence(x, A), _merge_sequence(x, B)
    ia = ib = 0
    while ia < len(sa) - 1 or ib < len(sb) - 1:
        ca, cb = sa[ia][1], sb[ib][1]
        cross = min(_avg(x, p, q) for p in ca for q in cb)
        na = sa[ia + 1][0] if ia < len(sa) - 1 else math.inf
        nb = sb[ib + 1][0] if ib < len(sb) - 1 else math.inf
        nxt = min(na, nb)
        if cross <= nxt:
            return False
        if na <= nb:
            ia += 1
        else:
            ib += 1
    return True


def two_cluster_oracle(values) -> np.ndarray | None:
    """Upper-cluster mask by exhaustive 2-partition enumeration.

    Returns None if the characterization is not unique (ties).
    """
    x = [float(v) for v in values]
    n = len(x)
    if n == 1:
        return np.array([True])
    found = []
    rest = list(range(1, n))
    for r in range(0, n - 1):
        for combo in itertools.combinations(rest, r):
            A = [0, *combo]
            B = [i for i in range(n) if i not in A]
            if _is_top_split(x, A, B):
                found.append((A, B))
    if len(found) != 1:
        return None
    A, B = found[0]
    upper = A if np.mean([x[i] for i in A]) > np.mean([x[i] for i in B]) else B
    mask = np.zeros(n, dtype=bool)
    mask[upper] = True
    return mask


# -- HOTA --------------------------------------------------------------------------


def _iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _matchings(n_g, n_p):
    """All partial injective maps from gt indices to pred indices."""
    slots = list(range(n_p)) + [None] * n_g
    seen = set()
    for perm in itertools.permutations(slots, n_g):
        if perm in seen:
            continue
        seen.add(perm)
        yield [(g, p) for g, p in enumerate(perm) if p is not None]


def hota_oracle(gt, pred, alphas=None):
    """gt/pred: {frame: [(id, (x1,y1,x2,y2)), ...]} -> dict of averaged metrics."""
    alphas = alphas if alphas is not None else [0.05 * k for k in range(1, 20)]
    frames = sorted(set(gt) | set(pred))
    gids = sorted({i for f in frames for i, _ in gt.get(f, [])})
    pids = sorted({i for f in frames for i, _ in pred.get(f, [])})
    n_gt = sum(len(gt.get(f, [])) for f in frames)
    n_pr = sum(len(pred.get(f, [])) for f in frames)
    names = ["hota", "deta", "detre", "detpr", "assa", "assre", "asspr", "loca"]
    if n_gt == 0 or n_pr == 0:
        row = dict(hota=0.0, deta=0.0, detre=0.0, detpr=0.0, assa=0.0, assre=0.0, asspr=0.0, loca=1.0)
        return row

    g_count = {g: sum(1 for f in frames for i, _ in gt.get(f, []) if i == g) for g in gids}
    p_count = {p: sum(1 for f in frames for i, _ in pred.get(f, []) if i == p) for p in pids}
    pot = {(g, p): 0.0 for g in gids for p in pids}
    for f in frames:
        G, P = gt.get(f, []), pred.get(f, [])
        sim = [[_iou(gb, pb) for _, pb in P] for _, gb in G]
        for a, (g, _) in enumerate(G):
            for b, (p, _) in enumerate(P):
                row_sum = sum(sim[a])
                col_sum = sum(sim[k][b] for k in range(len(G)))
                denom = row_sum + col_sum - sim[a][b]
                if denom > 0:
                    pot[(g, p)] += sim[a][b] / denom
    align = {k: v / (g_count[k[0]] + p_count[k[1]] - v) for k, v in pot.items()}

    chosen = []
    for f in frames:
        G, P = gt.get(f, []), pred.get(f, [])
        best, best_m = -1.0, []
        for m in _matchings(len(G), len(P)):
            s = sum(align[(G[a][0], P[b][0])] * _iou(G[a][1], P[b][1]) for a, b in m)
            if s > best + 1e-12:
                best, best_m = s, m
        chosen.append([(G[a][0], P[b][0], _iou(G[a][1], P[b][1])) for a, b in best_m])

    acc = {n: [] for n in names}
    for alpha in alphas:
        pairs = [(g, p, s) for frame in chosen for g, p, s in frame if s >= alpha - 1e-15]
        tp = len(pairs)
        fn, fp = n_gt - tp, n_pr - tp
        row = {
            "deta": tp / max(1, tp + fn + fp),
            "detre": tp / max(1, tp + fn),
            "detpr": tp / max(1, tp + fp),
        }
        if tp:
            cnt = {}
            for g, p, _ in pairs:
                cnt[(g, p)] = cnt.get((g, p), 0) + 1
            ass = are = apr = 0.0
            for g, p, _ in pairs:
                tpa = cnt[(g, p)]
                ass += tpa / (g_count[g] + p_count[p] - tpa)
                are += tpa / g_count[g]
                apr += tpa / p_count[p]
            row.update(assa=ass / tp, assre=are / tp, asspr=apr / tp, loca=sum(s for *_, s in pairs) / tp)
        else:
            row.update(assa=0.0, assre=0.0, asspr=0.0, loca=1.0)
        row["hota"] = math.sqrt(row["deta"] * row["assa"])
        for n in names:
            acc[n].append(row[n])
    return {n: sum(v) / len(v) for n, v in acc.items()}
