import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.cluster.hierarchy import fcluster, linkage

from oracles import two_cluster_oracle
from refertrack.selection import (
    MATCHED,
    UNMATCHED,
    ScoredDetection,
    SelectionConfig,
    SelectionError,
    cluster_select,
    majority_vote,
    select,
    threshold_select,
    two_cluster_split,
)


def scored(values, tracks=None):
    tracks = tracks or list(range(len(values)))
    return [ScoredDetection(t, i, v) for i, (t, v) in enumerate(zip(tracks, values))]


def labels(items):
    return [s.label for s in items]


class TestThreshold:
    def test_examples(self):
        assert labels(threshold_select(scored([0.9, 0.1]), 0.5)) == [MATCHED, UNMATCHED]
        assert labels(threshold_select(scored([0.9, 0.1]), 0.0)) == [MATCHED, MATCHED]
        assert threshold_select([], 0.5) == []


class TestCluster:
    def test_example(self):
        out = cluster_select(scored([0.9, 0.85, 0.2, 0.15]))
        assert labels(out) == [MATCHED, MATCHED, UNMATCHED, UNMATCHED]

    def test_single(self):
        assert labels(cluster_select(scored([0.5]))) == [MATCHED]

    def test_zero_spread(self):
        assert labels(cluster_select(scored([0.4, 0.4, 0.4]))) == [MATCHED] * 3

    def test_empty(self):
        assert cluster_select([]) == []

    def test_outlier_high(self):
        out = cluster_select(scored([0.1, 0.12, 0.11, 0.13, 3.0]))
        assert labels(out) == [UNMATCHED] * 4 + [MATCHED]

    def test_agrees_with_oracle(self):
        rng = np.random.default_rng(0)
        checked = 0
        for _ in range(300):
            n = int(rng.integers(2, 8))
            v = np.round(rng.uniform(0, 5, n), 3)
            want = two_cluster_oracle(v)
            if want is None:
                continue
            assert np.array_equal(two_cluster_split(v), want), v
            checked += 1
        assert checked > 250

    def test_agrees_with_scipy_linkage(self):
        rng = np.random.default_rng(1)
        for _ in range(300):
            n = int(rng.integers(3, 12))
            v = rng.normal(size=n) * rng.uniform(0.1, 3)
            Z = linkage(v.reshape(-1, 1), method="average")
            # distinct merge heights mean no tie-breaking ambiguity
            if len(np.unique(np.round(Z[:, 2], 12))) < n - 1:
                continue
            lab = fcluster(Z, 2, criterion="maxclust")
            upper = lab == lab[np.argmax(v)]
            assert np.array_equal(two_cluster_split(v), upper)

    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8), st.floats(-100, 100), st.floats(0.1, 10))
    def test_affine_invariance(self, v, shift, scale):
        v = np.round(np.array(v), 3)
        if v.max() - v.min() < 1e-3 or two_cluster_oracle(v) is None:
            return
        base = labels(cluster_select(scored(v)))
        assert labels(cluster_select(scored(v * scale + shift))) == base


class TestMajority:
    def test_majority_matched(self):
        items = [ScoredDetection(1, f, 0, lab) for f, lab in enumerate([MATCHED, MATCHED, UNMATCHED])]
        assert labels(majority_vote(items, [1])) == [MATCHED] * 3

    def test_majority_unmatched(self):
        items = [ScoredDetection(1, f, 0, lab) for f, lab in enumerate([UNMATCHED, UNMATCHED, MATCHED])]
        assert labels(majority_vote(items, [1])) == [UNMATCHED] * 3

    def test_tie(self):
        items = [ScoredDetection(1, 0, 0, MATCHED), ScoredDetection(1, 1, 0, UNMATCHED)]
        assert labels(majority_vote(items, [1])) == [MATCHED] * 2
        assert labels(majority_vote(items, [1], tie_policy=UNMATCHED)) == [UNMATCHED] * 2

    def test_unknown_track(self):
        with pytest.raises(SelectionError):
            majority_vote([ScoredDetection(9, 0, 0, MATCHED)], [1])

    def test_unlabeled(self):
        with pytest.raises(SelectionError):
            majority_vote([ScoredDetection(1, 0, 0)], [1])

    @given(st.lists(st.tuples(st.integers(0, 4), st.booleans()), max_size=30))
    def test_homogeneous(self, items):
        dets = [ScoredDetection(t, f, 0, MATCHED if m else UNMATCHED) for f, (t, m) in enumerate(items)]
        out = majority_vote(dets, range(5))
        for t in range(5):
            assert len({s.label for s in out if s.track_id == t}) <= 1


class TestSelect:
    def test_modes(self):
        # track 1 is a true match with one noisy low detection; track 2 is a non-match with one spike
        items = scored([3.0, 2.9, 0.4, 0.5, 0.4, 2.8, 0.3], tracks=[1, 1, 1, 2, 2, 2, 3])
        truth = {1: True, 2: False, 3: False}

        def purity(res):
            per = {}
            for s in res.labeled:
                per.setdefault(s.track_id, []).append((s.label == MATCHED) == truth[s.track_id])
            return np.mean([np.mean(v) for v in per.values()])

        t = select(items, [1, 2, 3], SelectionConfig(mode="threshold", threshold=0.35))
        c = select(items, [1, 2, 3], SelectionConfig(mode="cluster"))
        mv = select(items, [1, 2, 3], SelectionConfig(mode="cluster+mv"))
        assert purity(t) < purity(c) < purity(mv) == 1.0
        assert mv.report["selected_tracks"] == [1]

    def test_quantile_threshold(self):
        items = scored([1, 2, 3, 4, 5])
        res = select(items, range(5), SelectionConfig(mode="threshold", threshold_quantile=0.25))
        assert res.report["threshold"] == 2.0
        assert res.report["matched"] == 4

    def test_empty(self):
        assert select([], [], SelectionConfig(mode="cluster")).labeled == []

    def test_unknown_mode(self):
        with pytest.raises(SelectionError):
            select([], [], SelectionConfig(mode="vote"))

    def test_threshold_needs_value(self):
        with pytest.raises(SelectionError):
            SelectionConfig(mode="threshold").validate()

    def test_order_independent(self):
        rng = np.random.default_rng(3)
        items = [ScoredDetection(int(t), f, float(v)) for f, (t, v) in enumerate(zip(rng.integers(0, 4, 20), rng.choice([0.1, 0.5, 0.9], 20)))]
        a = select(items, range(4), SelectionConfig())
        b = select(list(reversed(items)), range(4), SelectionConfig())
        assert a.labeled == b.labeled and a.report == b.report
