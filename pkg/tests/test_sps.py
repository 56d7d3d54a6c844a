import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dnet import tensor as T
from dnet.errors import ParameterError
from dnet.geometry import PointCloud
from dnet.sps import DistinctionResult, SpsParams, attentive_scores, distinction, select_distinctive, split_sets
from dnet.tensor import Tensor

from conftest import fd_errors, weighted_sum
from oracles import attentive_scores_loops


def make_params(din, width, seed, dtype=np.float64):
    p = SpsParams(din, width, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    for lin in (p.g, p.h):
        lin.bias.data = rng.normal(scale=0.3, size=lin.bias.shape)
    return p.astype(dtype)


def scores(points, params, axis="column"):
    with T.precision(np.float64):
        return attentive_scores(Tensor(points), params, axis).data


class TestAttentiveScores:
    def test_identical_points_give_unit_scores(self):
        p = make_params(3, 8, 0)
        np.testing.assert_allclose(scores(np.ones((6, 3)) * 0.3, p), 1.0, atol=1e-12)

    def test_hand_fixed_identity_projection(self):
        p = make_params(2, 2, 0)
        for lin in (p.g, p.h):
            lin.weight.data = np.eye(2)
            lin.bias.data = np.zeros(2)
        pts = np.array([[0.0, 1.0], [1.0, 0.5], [-0.5, 0.2]])
        ref = attentive_scores_loops(pts, np.eye(2), np.zeros(2), np.eye(2), np.zeros(2))
        np.testing.assert_allclose(scores(pts, p), ref, atol=1e-5)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        n, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
        p = make_params(3, d, seed)
        pts = rng.normal(size=(n, 3))
        ref = attentive_scores_loops(pts, p.g.weight.data, p.g.bias.data, p.h.weight.data, p.h.bias.data)
        np.testing.assert_allclose(scores(pts, p), ref, atol=1e-5)

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 40))
    @settings(max_examples=40, deadline=None)
    def test_sum_is_n(self, seed, n):
        rng = np.random.default_rng(seed)
        p = make_params(3, 16, seed % 1000, np.float32)
        alpha = attentive_scores(Tensor(rng.normal(size=(n, 3))), p).data
        assert abs(alpha.sum() - n) <= 1e-4 * max(1, n / 10)
        assert np.all(alpha > 0)

    def test_sum_is_n_batched(self, rng):
        p = make_params(3, 16, 0, np.float32)
        alpha = attentive_scores(Tensor(rng.normal(size=(4, 50, 3))), p).data
        np.testing.assert_allclose(alpha.sum(axis=-1), 50, atol=1e-4)

    def test_row_axis_also_sums_to_n(self, rng):
        p = make_params(3, 8, 0)
        alpha = scores(rng.normal(size=(12, 3)), p, "row")
        assert abs(alpha.sum() - 12) < 1e-9

    def test_too_few_points(self):
        with pytest.raises(ParameterError):
            attentive_scores(Tensor(np.zeros((1, 3))), make_params(3, 4, 0))

    @pytest.mark.parametrize("seed", range(20))
    def test_permutation_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        p = make_params(3, 8, seed)
        pts = rng.normal(size=(15, 3))
        perm = rng.permutation(15)
        np.testing.assert_allclose(scores(pts[perm], p), scores(pts, p)[perm], atol=1e-6)

    @pytest.mark.parametrize("seed", range(20))
    def test_gradients_reach_both_projections(self, seed):
        rng = np.random.default_rng(seed)
        p = make_params(3, 4, seed)
        pts = Tensor(rng.normal(size=(7, 3)), dtype=np.float64)
        leaves = p.parameters()
        errs = fd_errors(lambda: weighted_sum(attentive_scores(pts, p), seed), leaves)
        assert max(errs) <= 1e-3
        for q in leaves:
            q.grad = None
        weighted_sum(attentive_scores(pts, p), seed).backward()
        assert all(np.linalg.norm(q.grad) > 0 for q in (p.g.weight, p.h.weight))


class TestSelect:
    def test_example(self):
        high, low = select_distinctive(np.array([0.1, 0.9, 0.5, 0.3]), 1)
        assert list(high) == [1] and list(low) == [0]

    def test_ties(self):
        high, low = select_distinctive(np.ones(5), 2)
        assert list(high) == [0, 1] and list(low) == [0, 1]

    @pytest.mark.parametrize("seed", range(20))
    def test_matches_sort_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 6, size=16).astype(float)  # with ties
        n1 = 4
        high, low = select_distinctive(a, n1)
        by_high = sorted(range(16), key=lambda i: (-a[i], i))[:n1]
        by_low = sorted(range(16), key=lambda i: (a[i], i))[:n1]
        assert list(high) == by_high and list(low) == by_low

    @given(st.integers(0, 2 ** 31 - 1), st.integers(2, 30))
    @settings(max_examples=40, deadline=None)
    def test_disjoint_when_room(self, seed, n):
        a = np.random.default_rng(seed).normal(size=n)
        n1 = n // 2
        if n1 < 1:
            return
        high, low = select_distinctive(a, n1)
        assert not set(high) & set(low)

    @pytest.mark.parametrize("seed", range(10))
    def test_monotone_promotion(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.normal(size=20)
        n1 = 5
        high, _ = select_distinctive(a, n1)
        outsider = next(i for i in range(20) if i not in set(high))
        a[outsider] = np.sort(a)[::-1][n1 - 1] + 1e-3
        assert outsider in set(select_distinctive(a, n1)[0])

    def test_n1_too_large(self):
        with pytest.raises(ParameterError):
            select_distinctive(np.ones(3), 4)

    def test_batched(self, rng):
        a = rng.normal(size=(3, 10))
        high, low = select_distinctive(a, 2)
        for b in range(3):
            h, l = select_distinctive(a[b], 2)
            assert list(high[b]) == list(h) and list(low[b]) == list(l)


class TestSplitSets:
    def test_full_permutations(self, rng):
        cloud = PointCloud(rng.normal(size=(6, 3)))
        alpha, res = distinction(Tensor(cloud.points), make_params(3, 4, 0, np.float32), 6)
        ph, pl = split_sets(cloud, res)
        for s in (ph, pl):
            assert sorted(map(tuple, s.points)) == sorted(map(tuple, cloud.points))

    def test_singletons_at_extremes(self, rng):
        cloud = PointCloud(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
        alpha = rng.normal(size=8)
        high, low = select_distinctive(alpha, 1)
        ph, pl = split_sets(cloud, DistinctionResult(alpha, high, low))
        np.testing.assert_array_equal(ph.points[0], cloud.points[np.argmax(alpha)])
        np.testing.assert_array_equal(pl.points[0], cloud.points[np.argmin(alpha)])
        np.testing.assert_array_equal(ph.normals[0], cloud.normals[np.argmax(alpha)])

    def test_gather_consistency(self, rng):
        cloud = PointCloud(rng.normal(size=(12, 3)))
        alpha = rng.normal(size=12)
        high, low = select_distinctive(alpha, 4)
        ph, _ = split_sets(cloud, DistinctionResult(alpha, high, low))
        for m in range(4):
            np.testing.assert_array_equal(ph.points[m], cloud.points[high[m]])

    def test_invalid_index(self, rng):
        cloud = PointCloud(rng.normal(size=(4, 3)))
        with pytest.raises(IndexError):
            split_sets(cloud, DistinctionResult(np.zeros(4), np.array([9]), np.array([0])))
