import math
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from qtune.dataset_io import GroundTruth, SyntheticSpec, compute_ground_truth, make_synthetic
from qtune.quantization import HierarchyConfig, build_hierarchy, preset, quantized_distance
from qtune.recall_stats import (DENSE_LIMIT, LossCurve, LossMatrix, StatsError, compute_stats, compute_U, compute_V,
                                convexify, convexify_curve, hulls, load_stats, loss_matrix, lower_hull,
                                per_query_loss, proxy_recall, save_stats)
from qtune.search import single_layer_topk


@pytest.fixture(scope="module")
def inst():
    ds, qs = make_synthetic(SyntheticSpec(n=600, d=8, n_queries=15, clusters=5, seed=8))
    gt = compute_ground_truth(ds, qs, 10)
    h = build_hierarchy(ds, preset("desk_deep", ds.n, ds.d))
    return ds, qs, gt, h


def hits_table(V_row, n):
    """Neighbors recovered at each depth 0..n for one query and level."""
    return np.array([int(np.sum(V_row < t)) for t in range(n + 1)])


class TestU:
    def test_exact_level_equals_ground_truth_distances(self, inst):
        _, qs, gt, h = inst
        ws = compute_U(qs, gt, h)
        np.testing.assert_array_equal(ws.U[:, -1, :], gt.distances)
        np.testing.assert_array_equal(ws.U_index[:, -1, :], gt.indices)

    def test_single_neighbor(self, inst):
        _, qs, gt, h = inst
        g1 = GroundTruth(gt.indices[:, :1], gt.distances[:, :1], gt.metric)
        assert compute_U(qs, g1, h).U.shape == (qs.n_q, h.m, 1)

    def test_elementwise(self, inst):
        _, qs, gt, h = inst
        ws = compute_U(qs, gt, h)
        for a in (0, 7):
            for b in range(h.m):
                vals = sorted((quantized_distance(h.levels[b], h.metric, qs.queries[a], int(j)), int(j))
                              for j in gt.indices[a])
                assert ws.U[a, b].tolist() == [v for v, _ in vals]
                assert ws.U_index[a, b].tolist() == [j for _, j in vals]

    def test_mismatched_inputs(self, inst):
        _, qs, gt, h = inst
        with pytest.raises(StatsError):
            compute_U(qs.subset([0, 1]), gt, h)


class TestV:
    def test_sweep_oracle(self, inst):
        _, qs, gt, h = inst
        ws = compute_U(qs, gt, h)
        compute_V(ws, h, qs)
        for a in (0, 3, 11):
            for b in range(h.m):
                order = single_layer_topk(h.levels[b], h.metric, qs.queries[a], h.n)
                g = set(gt.indices[a].tolist())
                for t in range(0, h.n + 1, 7):
                    expect = len(g & set(order[:t].tolist()))
                    assert int(np.sum(ws.V[a, b] < t)) == expect
                for t in (1, 50, 333):
                    direct = single_layer_topk(h.levels[b], h.metric, qs.queries[a], t)
                    assert len(g & set(direct.tolist())) == int(np.sum(ws.V[a, b] < t))

    def test_exact_level_full_depth_is_perfect_ranking(self):
        ds, qs = make_synthetic(SyntheticSpec(n=40, d=3, n_queries=3, seed=1))
        gt = compute_ground_truth(ds, qs, 40)
        h = build_hierarchy(ds, HierarchyConfig([], keep_exact=True))
        ws = compute_U(qs, gt, h)
        compute_V(ws, h, qs)
        for a in range(3):
            assert ws.V[a, 0].tolist() == list(range(40))

    def test_threads_agree(self, inst):
        _, qs, gt, h = inst
        lm1, ws1 = compute_stats(qs, gt, h, threads=1)
        lm3, ws3 = compute_stats(qs, gt, h, threads=3)
        np.testing.assert_array_equal(ws1.V, ws3.V)


class TestLossMatrix:
    def test_worked_example_steps(self):
        # V = [1, 3, 8]: neighbor c is recovered once the depth exceeds V[c]
        V = np.array([[[1, 3, 8]]])
        lm = loss_matrix(V, 20, 3)
        hits = hits_table(V[0, 0], 20)
        assert hits[:10].tolist() == [0, 0, 1, 1, 2, 2, 2, 2, 2, 3]
        for t in range(21):
            assert lm.value(0, t) == pytest.approx(-math.log(max(hits[t], 0.5) / 3))

    def test_full_depth_has_zero_loss(self, inst):
        _, qs, gt, h = inst
        lm, _ = compute_stats(qs, gt, h)
        for b in range(h.m):
            assert lm.value(b, h.n) == 0.0

    def test_two_neighbor_query(self):
        lm = loss_matrix(np.array([[[0, 5]]]), 10, 2)
        assert lm.value(0, 3) == -math.log(1 / 2)
        assert lm.value(0, 0) == -math.log(0.5 / 2)
        assert lm.value(0, 6) == 0.0

    def test_floor_when_nothing_recovered(self):
        V = np.full((4, 2, 10), 50)
        lm = loss_matrix(V, 100, 10)
        for b in range(2):
            assert lm.value(b, 1) == pytest.approx(2.9957, abs=1e-4)
            assert lm.value(b, 1) == -math.log(0.05)

    def test_errors(self):
        with pytest.raises(StatsError):
            loss_matrix(np.zeros((1, 1, 2), dtype=int), 5, 2, floor=0)
        with pytest.raises(StatsError):
            loss_matrix(np.full((1, 1, 2), 5), 5, 2)
        with pytest.raises(StatsError):
            LossMatrix([LossCurve(np.array([0, 3]), np.array([1.0, 0.0]))], 3, 1, 1).value(0, 4)

    def test_dense_refused_when_huge(self):
        n = DENSE_LIMIT + 1
        lm = LossMatrix([LossCurve(np.array([0, n]), np.array([1.0, 0.0]))], n, 1, 1)
        with pytest.raises(StatsError):
            lm.dense()

    def test_direct_oracle(self, inst):
        _, qs, gt, h = inst
        lm, ws = compute_stats(qs, gt, h)
        dense = lm.dense()
        orders = [[single_layer_topk(h.levels[b], h.metric, q, h.n) for b in range(h.m)] for q in qs.queries]
        for b in range(h.m):
            depths = np.unique(np.concatenate([ws.V[:, b].ravel(), ws.V[:, b].ravel() + 1, [0, h.n]]))
            for t in depths[depths <= h.n]:
                hits = np.array([len(set(orders[a][b][:t].tolist()) & set(gt.indices[a].tolist()))
                                 for a in range(qs.n_q)])
                exact = sum(map(Fraction, per_query_loss(hits, 10).tolist())) / qs.n_q
                assert dense[b, t] == float(exact)

    def test_rows_non_increasing(self, inst):
        _, qs, gt, h = inst
        lm, _ = compute_stats(qs, gt, h)
        assert np.all(np.diff(lm.dense(), axis=1) <= 0)

    def test_truncated_k(self, inst):
        _, qs, gt, h = inst
        lm, ws = compute_stats(qs, gt, h, k=4)
        assert lm.k == 4 and ws.V.shape[2] == 4
        with pytest.raises(StatsError):
            compute_stats(qs, gt, h, k=11)

    def test_query_order_does_not_change_means(self):
        rng = np.random.default_rng(0)
        V = rng.integers(0, 500, size=(37, 2, 10))
        a = loss_matrix(V, 500, 10)
        b = loss_matrix(V[rng.permutation(37)], 500, 10)
        np.testing.assert_array_equal(a.dense(), b.dense())

    def test_runtime_scales_linearly_in_queries(self):
        ds, qs = make_synthetic(SyntheticSpec(n=20_000, d=16, n_queries=400, clusters=32, seed=3))
        gt = compute_ground_truth(ds, qs, 10)
        h = build_hierarchy(ds, preset("ivf_pq", ds.n, ds.d))

        def best_of(rows, reps=3):
            times = []
            for _ in range(reps):
                start = time.perf_counter()
                compute_stats(qs.subset(rows), gt.subset(rows), h)
                times.append(time.perf_counter() - start)
            return min(times)

        best_of(np.arange(20), 1)
        ratio = best_of(np.arange(400)) / best_of(np.arange(200))
        assert 1.5 <= ratio <= 2.5


class TestHull:
    def test_hand_example(self):
        hull = convexify([4, 3, 3, 0])
        assert hull.depths.tolist() == [0, 3]
        np.testing.assert_allclose(hull(np.arange(4)), [4, 8 / 3, 4 / 3, 0])

    def test_convex_row_is_fixed_point(self):
        row = [10.0, 6.0, 3.0, 1.0, 0.0]
        hull = convexify(row)
        assert hull.depths.tolist() == [0, 1, 2, 3, 4]
        assert hull.values.tolist() == row

    def test_linear_row_keeps_endpoints(self):
        hull = convexify([6.0, 4.0, 2.0, 0.0])
        assert hull.depths.tolist() == [0, 3]

    def test_empty_row(self):
        with pytest.raises(StatsError):
            convexify([])

    def test_domain(self):
        hull = convexify_curve(LossCurve(np.array([0, 4, 9]), np.array([2.0, 1.0, 0.0])), lo=2)
        assert hull.depths[0] == 2 and hull(2) == 2.0
        with pytest.raises(StatsError):
            hull(1)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(0, 10), min_size=1, max_size=40), st.data())
    def test_hull_properties(self, drops, data):
        row = np.cumsum([0.0] + drops)[::-1].copy()          # non-increasing, ends at 0
        hull = convexify(row)
        assert np.all(np.diff(hull.slopes) >= -1e-9)
        assert np.all(hull(np.arange(row.size)) <= row + 1e-9)
        assert hull.depths[0] == 0 and hull.depths[-1] == row.size - 1
        lo = data.draw(st.integers(0, row.size - 1))
        knots = np.flatnonzero(np.r_[True, np.diff(row) != 0])
        curve = LossCurve(knots.astype(np.int64), row[knots])
        if curve.depths[-1] != row.size - 1:
            curve = LossCurve(np.r_[curve.depths, row.size - 1], np.r_[curve.values, row[-1]])
        from_knots = convexify_curve(curve, lo)
        direct = lower_hull(np.arange(lo, row.size), row[lo:])
        np.testing.assert_allclose(from_knots(np.arange(lo, row.size)), direct(np.arange(lo, row.size)),
                                   rtol=1e-12, atol=1e-12)


class TestProxyRecall:
    def const(self, v, n=10):
        return convexify([v] * (n + 1))

    def test_zero_loss(self):
        assert proxy_recall([10, 10], [convexify([1.0, 0.5, 0.0] + [0.0] * 8)] * 2) == 1.0

    def test_single_level(self):
        assert proxy_recall([3], [self.const(-math.log(0.8))]) == pytest.approx(0.8)

    def test_product(self):
        assert proxy_recall([3, 3], [self.const(-math.log(0.9)), self.const(-math.log(0.8))]) == pytest.approx(0.72)

    def test_out_of_range(self):
        with pytest.raises(StatsError):
            proxy_recall([11], [self.const(0.1)])


class TestPersistence:
    def test_round_trip_and_determinism(self, inst, tmp_path):
        _, qs, gt, h = inst
        lm, _ = compute_stats(qs, gt, h)
        save_stats(tmp_path / "a", lm, h)
        save_stats(tmp_path / "b", compute_stats(qs, gt, h)[0], h)
        for f in sorted((tmp_path / "a").iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
        back = load_stats(tmp_path / "a")
        np.testing.assert_array_equal(back.loss.dense(), lm.dense())
        assert back.footprints == h.footprints and back.hierarchy_digest == h.digest()
        for c1, c2 in zip(hulls(back.loss, 10), hulls(lm, 10)):
            np.testing.assert_array_equal(c1.values, c2.values)

    def test_missing(self, tmp_path):
        with pytest.raises(StatsError):
            load_stats(tmp_path)
