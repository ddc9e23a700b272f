from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtune.dataset_io import Dataset, GroundTruth, Metric, SyntheticSpec, compute_ground_truth, make_synthetic
from qtune.quantization import HierarchyConfig, LevelSpec, build_hierarchy, preset, quantized_distance
from qtune.search import (TuningError, bench, evaluate_recall, quantized_search, single_layer_topk,
                          validate_tuning)


def simulate(h, t, q):
    """Level-by-level narrowing with scalar distances and explicit tuple sorting."""
    cand = list(range(h.n))
    for i, ti in enumerate(t):
        keyed = sorted((quantized_distance(h.levels[i], h.metric, q, j), j) for j in cand)
        cand = [j for _, j in keyed[:ti]]
    return cand


def random_tuning(rng, n, m, k):
    t = np.sort(rng.integers(k, n + 1, size=m))[::-1]
    return [int(x) for x in t]


@pytest.fixture(scope="module")
def toy():
    pts = np.array([[0.0], [1.0], [2.0], [3.0], [10.0], [11.0], [12.0], [13.0]])
    h = build_hierarchy(Dataset(pts), HierarchyConfig([LevelSpec("vq", centroids=2)], keep_exact=True))
    return h


@pytest.fixture(scope="module")
def setup():
    ds, qs = make_synthetic(SyntheticSpec(n=1500, d=8, n_queries=12, clusters=6, seed=4))
    gt = compute_ground_truth(ds, qs, 10)
    hs = {name: build_hierarchy(ds, preset(name, ds.n, ds.d)) for name in ("ivf_pq", "desk_deep")}
    return ds, qs, gt, hs


class TestToy:
    def test_centroids(self, toy):
        assert sorted(toy.levels[0].table[:, 0].tolist()) == [1.5, 11.5]

    def test_hand_enumerated(self, toy):
        q = np.array([2.2])
        # level 1 keeps the whole near bucket; exact distances 4.84, 1.44, 0.04, 0.64
        res, tr = quantized_search(toy, (4, 2), q, trace=True)
        assert res.tolist() == [2, 3]
        assert tr.candidates[0].tolist() == [0, 1, 2, 3]
        assert res.tolist() == simulate(toy, (4, 2), q)

    def test_tied_bucket_truncated_by_index(self, toy):
        q = np.array([2.2])
        res = quantized_search(toy, (3, 2), q)
        assert res.tolist() == [2, 1]
        assert res.tolist() == simulate(toy, (3, 2), q)

    def test_bytes(self, toy):
        _, tr = quantized_search(toy, (4, 2), np.array([2.2]), trace=True)
        # 2 one-dim float centroids = 8 bytes, exact level 32 bytes over 8 points
        assert tr.bytes_accessed == [Fraction(8), Fraction(4 * 32, 8)]
        assert tr.total_bytes == 24


class TestSearch:
    @pytest.mark.parametrize("name", ["ivf_pq", "desk_deep"])
    def test_matches_simulation(self, setup, name):
        _, qs, _, hs = setup
        h = hs[name]
        rng = np.random.default_rng(0)
        for a in range(4):
            t = random_tuning(rng, h.n, h.m, 10)
            assert quantized_search(h, t, qs.queries[a]).tolist() == simulate(h, t, qs.queries[a])

    def test_no_pruning_gives_ground_truth(self, setup):
        _, qs, gt, hs = setup
        h = hs["ivf_pq"]
        for a in range(qs.n_q):
            full = quantized_search(h, [h.n] * h.m, qs.queries[a])
            assert full[:10].tolist() == gt.indices[a].tolist()
            final = quantized_search(h, [h.n] * (h.m - 1) + [10], qs.queries[a])
            assert final.tolist() == gt.indices[a].tolist()

    @settings(max_examples=30, deadline=None)
    @given(st.data())
    def test_nesting_cardinality_and_bytes(self, setup, data):
        _, qs, _, hs = setup
        h = hs[data.draw(st.sampled_from(["ivf_pq", "desk_deep"]))]
        t = sorted(data.draw(st.lists(st.integers(10, h.n), min_size=h.m, max_size=h.m)), reverse=True)
        q = qs.queries[data.draw(st.integers(0, qs.n_q - 1))]
        res, tr = quantized_search(h, t, q, trace=True)
        prev = set(range(h.n))
        for i, cand in enumerate(tr.candidates):
            assert len(cand) == t[i]
            assert set(cand.tolist()) <= prev
            prev = set(cand.tolist())
        fp = h.footprints
        closed = Fraction(fp[0]) + sum(Fraction(t[i] * fp[i + 1], h.n) for i in range(h.m - 1))
        assert tr.total_bytes == closed
        assert sorted(res.tolist()) == sorted(prev)

    def test_results_sorted_by_final_distance(self, setup):
        _, qs, _, hs = setup
        h = hs["desk_deep"]
        q = qs.queries[0]
        res = quantized_search(h, [800, 300, 100, 50], q)
        keys = [(quantized_distance(h.levels[-1], h.metric, q, int(j)), int(j)) for j in res]
        assert keys == sorted(keys)

    def test_invalid_tunings(self, setup):
        _, qs, _, hs = setup
        h = hs["ivf_pq"]
        with pytest.raises(TuningError):
            validate_tuning([0, 0, 0], h, 10)
        with pytest.raises(TuningError):
            validate_tuning([10, 20, 10], h)
        with pytest.raises(TuningError):
            validate_tuning([10, 10], h)
        with pytest.raises(TuningError):
            validate_tuning([h.n + 1, 10, 10], h)
        with pytest.raises(TuningError):
            validate_tuning([10.5, 10, 10], h)
        with pytest.raises(TuningError):
            quantized_search(h, [10, 10, 10], np.zeros(3))


class TestSingleLayer:
    def test_bounds(self, setup):
        _, qs, _, hs = setup
        lvl = hs["ivf_pq"].levels[1]
        assert single_layer_topk(lvl, Metric.SQUARED_EUCLIDEAN, qs.queries[0], lvl.n).size == lvl.n
        assert single_layer_topk(lvl, Metric.SQUARED_EUCLIDEAN, qs.queries[0], 0).size == 0
        with pytest.raises(TuningError):
            single_layer_topk(lvl, Metric.SQUARED_EUCLIDEAN, qs.queries[0], lvl.n + 1)

    def test_six_point_pq_level(self):
        rng = np.random.default_rng(1)
        pts = rng.normal(size=(6, 4))
        # 16 PQ centers need 16 rows: train on the points repeated, then keep six
        ds = Dataset(np.repeat(pts, 3, axis=0)[:18])
        h = build_hierarchy(ds, HierarchyConfig([LevelSpec("pq", dims_per_block=2)], keep_exact=True))
        lvl, q = h.levels[0], rng.normal(size=4)
        dist = [quantized_distance(lvl, h.metric, q, j) for j in range(lvl.n)]
        expect = [j for _, j in sorted(zip(dist, range(lvl.n)))][:3]
        assert single_layer_topk(lvl, h.metric, q, 3).tolist() == expect


class TestRecall:
    def gt(self):
        return GroundTruth(np.arange(20).reshape(2, 10), np.zeros((2, 10)), Metric.SQUARED_EUCLIDEAN)

    def test_perfect(self):
        g = self.gt()
        rep = evaluate_recall(list(g.indices), g, 10)
        assert rep.mean == 1.0 and rep.geometric_mean == 1.0

    def test_disjoint(self):
        g = self.gt()
        rep = evaluate_recall([np.arange(100, 110)] * 2, g, 10)
        assert rep.per_query.tolist() == [0.0, 0.0]
        assert rep.geometric_mean == pytest.approx(0.05)

    def test_half(self):
        g = self.gt()
        rep = evaluate_recall([np.r_[0:5, 50:55], np.r_[10:15, 60:65]], g, 10)
        assert rep.per_query.tolist() == [0.5, 0.5]

    def test_k_exceeds_ground_truth(self):
        g = self.gt()
        with pytest.raises(TuningError):
            evaluate_recall(list(g.indices), g, 11)


class TestBench:
    def test_bytes_and_recall(self, setup):
        _, qs, gt, hs = setup
        h = hs["desk_deep"]
        tunings = [[1500, 1500, 1500, 10], [400, 200, 60, 10], [600, 300, 100, 20]]
        rows = bench(h, tunings, qs, gt, 10)
        fp = h.footprints
        for t, r in zip(tunings, rows):
            assert r.bytes_per_query == fp[0] + sum(Fraction(t[i] * fp[i + 1], h.n) for i in range(h.m - 1))
        assert rows[0].recall == 1.0
        assert rows[2].bytes_per_query >= rows[1].bytes_per_query
        results = [quantized_search(h, tunings[1], q)[:10] for q in qs.queries]
        assert rows[1].recall == evaluate_recall(results, gt, 10).mean

    def test_rejects_below_k(self, setup):
        _, qs, gt, hs = setup
        with pytest.raises(TuningError):
            bench(hs["ivf_pq"], [[0, 0, 0]], qs, gt, 10)

    def test_threads_and_timing(self, setup):
        _, qs, gt, hs = setup
        h = hs["ivf_pq"]
        tunings = [[300, 50, 10], [900, 200, 10]]
        one = bench(h, tunings, qs, gt, 10)
        many = bench(h, tunings, qs, gt, 10, threads=3, timing=True, repeats=2, timing_queries=3)
        for a, b in zip(one, many):
            assert (a.recall, a.bytes_per_query) == (b.recall, b.bytes_per_query)
            assert b.seconds_per_query > 0 and b.qps == 1 / b.seconds_per_query
        assert one[0].qps is None

    def test_subset_queries_are_independent(self, setup):
        _, qs, gt, hs = setup
        h = hs["ivf_pq"]
        whole = bench(h, [[200, 40, 10]], qs, gt, 10)[0]
        parts = [bench(h, [[200, 40, 10]], qs.subset([a]), gt.subset([a]), 10)[0].recall for a in range(qs.n_q)]
        assert whole.recall == pytest.approx(np.mean(parts), abs=1e-12)
