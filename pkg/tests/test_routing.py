import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from adaptdhm.errors import EmptyBatchError, RoutingError, ShapeError
from adaptdhm.routing import (
    ClusterCenters,
    DegenerateClusterWarning,
    RoutingConfig,
    assign,
    distribution_coefficients,
    infer_route,
    init_centers,
    recompute_centers,
    route_batch,
    similarity_scores,
)

from oracles import routing_reference


def unit(v):
    v = np.asarray(v, dtype=float)
    return v / np.linalg.norm(v)


class TestInitCenters:
    def test_unit_norm(self):
        c = init_centers(RoutingConfig(K=5, seed=3), dim=7)
        np.testing.assert_allclose(np.linalg.norm(c.centers, axis=1), 1.0, atol=1e-9)
        assert c.batch_step == 0

    def test_same_seed(self):
        a = init_centers(RoutingConfig(K=4, seed=11), 6)
        b = init_centers(RoutingConfig(K=4, seed=11), 6)
        assert np.array_equal(a.centers, b.centers)

    def test_sigma_irrelevant_after_normalization(self):
        a = init_centers(RoutingConfig(K=3, seed=1, init_sigma=1.0), 5)
        b = init_centers(RoutingConfig(K=3, seed=1, init_sigma=7.5), 5)
        np.testing.assert_allclose(a.centers, b.centers, atol=1e-12)

    def test_high_dim_nearly_orthogonal(self):
        # dot of two random unit vectors in 1000-d has std 1/sqrt(1000) ~ 0.032
        dots = [abs(np.dot(*init_centers(RoutingConfig(K=2, seed=s), 1000).centers)) for s in range(50)]
        assert max(dots) < 0.15

    def test_invalid(self):
        with pytest.raises(RoutingError):
            RoutingConfig(K=0)
        with pytest.raises(RoutingError):
            RoutingConfig(iterations=0)
        with pytest.raises(RoutingError):
            RoutingConfig(ewma_beta=1.0)
        with pytest.raises(RoutingError):
            init_centers(RoutingConfig(K=2), 0)


class TestScores:
    def test_orthogonal(self):
        c = ClusterCenters(np.array([[1.0, 0.0]]))
        assert similarity_scores(c, np.array([[0.0, 3.0]]))[0, 0] == 0.0

    def test_scaled_center(self):
        c = ClusterCenters(np.array([unit([1.0, 2.0, 2.0])]))
        assert similarity_scores(c, 2 * c.centers)[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_manual_table(self):
        rng = np.random.default_rng(0)
        e = rng.normal(size=(3, 4))
        c = np.stack([unit(rng.normal(size=4)) for _ in range(2)])
        s = similarity_scores(ClusterCenters(c), e)
        for i in range(3):
            for j in range(2):
                assert s[i, j] == pytest.approx(sum(e[i, d] * c[j, d] for d in range(4)), abs=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            similarity_scores(ClusterCenters(np.eye(2)), np.ones((1, 3)))


class TestCoefficients:
    def test_symmetric(self):
        np.testing.assert_array_equal(distribution_coefficients(np.array([[0.0, 0.0]])), [[0.5, 0.5]])

    def test_ln3(self):
        # e^{ln 3} / (e^{ln 3} + 1) = 3/4
        r = distribution_coefficients(np.array([[math.log(3), 0.0]]))
        np.testing.assert_allclose(r, [[0.75, 0.25]], atol=1e-15)

    def test_large_scores(self):
        r = distribution_coefficients(np.array([[100.0, 0.0, 0.0], [1e5, 1e5 - 1, -1e5]]))
        assert np.all(np.isfinite(r))
        assert r[0, 0] == pytest.approx(1.0) and 0 < r[0, 1] < 1e-40


class TestRecompute:
    def test_single_point(self):
        e = np.array([[3.0, -4.0]])
        prev = init_centers(RoutingConfig(K=3, seed=0), 2).centers
        new = recompute_centers(np.array([[0.2, 0.5, 0.3]]), e, prev)
        np.testing.assert_allclose(new, np.tile([0.6, -0.8], (3, 1)), atol=1e-15)

    def test_hard_assignment(self):
        e = np.array([[2.0, 1.0], [-2.0, -1.0]])
        new = recompute_centers(np.array([[1.0, 0.0], [0.0, 1.0]]), e, np.eye(2))
        np.testing.assert_allclose(new, [unit([2, 1]), unit([-2, -1])], atol=1e-15)

    def test_brute_force(self):
        rng = np.random.default_rng(4)
        e = rng.normal(size=(4, 3))
        r = rng.random((4, 2))
        r /= r.sum(axis=1, keepdims=True)
        new = recompute_centers(r, e, np.eye(2, 3))
        for j in range(2):
            acc = np.zeros(3)
            for i in range(4):
                acc += r[i, j] * e[i]
            np.testing.assert_allclose(new[j], acc / math.sqrt(sum(acc**2)), atol=1e-14)

    def test_degenerate_keeps_previous(self):
        e = np.array([[1.0, 0.0], [-1.0, 0.0]])
        r = np.array([[0.5, 1.0], [0.5, 0.0]])  # cluster 0: 0.5*e1 + 0.5*e2 = 0
        prev = np.array([[0.0, 1.0], [1.0, 0.0]])
        with pytest.warns(DegenerateClusterWarning):
            new = recompute_centers(r, e, prev)
        np.testing.assert_array_equal(new[0], prev[0])
        np.testing.assert_array_equal(new[1], [1.0, 0.0])


class TestRouteBatch:
    def test_beta_near_one_keeps_centers(self):
        cfg = RoutingConfig(K=3, ewma_beta=1 - 1e-12)
        c = init_centers(cfg, 4)
        e = np.random.default_rng(0).normal(size=(10, 4))
        _, new = route_batch(c, e, cfg)
        np.testing.assert_allclose(new.centers, c.centers, atol=1e-9)
        assert new.batch_step == c.batch_step + 1

    def test_one_iteration_single_point(self):
        # hand trace: s = [c1.e, c2.e] = [0.6*1 + 0.8*2, -1] = [2.2, -1]
        # r = softmax(2.2, -1) against the ORIGINAL centers
        c = ClusterCenters(np.array([[0.6, 0.8], [-1.0, 0.0]]))
        e = np.array([[1.0, 2.0]])
        r, new = route_batch(c, e, RoutingConfig(K=2, iterations=1, ewma_beta=0.5))
        p = 1 / (1 + math.exp(-3.2))
        np.testing.assert_allclose(r, [[p, 1 - p]], atol=1e-15)
        # both recomputed centers are normalize(e); then blended with the old ones
        ue = unit([1, 2])
        np.testing.assert_allclose(new.centers[0], unit(0.5 * np.array([0.6, 0.8]) + 0.5 * ue), atol=1e-15)
        np.testing.assert_allclose(new.centers[1], unit(0.5 * np.array([-1.0, 0.0]) + 0.5 * ue), atol=1e-15)

    def test_ewma_closed_form(self):
        # within-batch center is [0,1]; 0.9*[1,0] + 0.1*[0,1] = [0.9, 0.1] -> /sqrt(0.82)
        c = ClusterCenters(np.array([[1.0, 0.0]]))
        _, new = route_batch(c, np.array([[0.0, 5.0]]), RoutingConfig(K=1, iterations=1, ewma_beta=0.9))
        np.testing.assert_allclose(new.centers[0], [0.9 / math.sqrt(0.82), 0.1 / math.sqrt(0.82)], atol=1e-15)
        np.testing.assert_allclose(new.centers[0], [0.99388, 0.11043], atol=1e-5)

    def test_input_not_mutated(self):
        cfg = RoutingConfig(K=2)
        c = init_centers(cfg, 3)
        before = c.centers.copy()
        route_batch(c, np.random.default_rng(1).normal(size=(5, 3)), cfg)
        assert np.array_equal(c.centers, before) and c.batch_step == 0

    @pytest.mark.parametrize("iterations", [1, 2, 3])
    def test_matches_reference(self, iterations):
        rng = np.random.default_rng(iterations)
        cfg = RoutingConfig(K=3, iterations=iterations)
        c = init_centers(cfg, 5)
        e = rng.normal(size=(12, 5))
        r, new = route_batch(c, e, cfg)
        r_ref, c_ref = routing_reference(c.centers.tolist(), e.tolist(), iterations, 0.9)
        np.testing.assert_allclose(r, r_ref, atol=1e-12)
        np.testing.assert_allclose(new.centers, c_ref, atol=1e-12)

    def test_empty_batch(self):
        cfg = RoutingConfig(K=2)
        with pytest.raises(EmptyBatchError):
            route_batch(init_centers(cfg, 3), np.empty((0, 3)), cfg)

    def test_width_mismatch(self):
        cfg = RoutingConfig(K=2)
        with pytest.raises(ShapeError):
            route_batch(init_centers(cfg, 3), np.ones((2, 4)), cfg)


class TestAssign:
    def test_argmax(self):
        assert assign(np.array([[0.2, 0.5, 0.3]]))[0] == 1

    def test_tie_lowest(self):
        assert assign(np.array([[0.5, 0.5]]))[0] == 0
        assert assign(np.array([[0.2, 0.4, 0.4]]))[0] == 1

    def test_brute_force(self):
        r = distribution_coefficients(np.random.default_rng(0).normal(size=(50, 4)))
        a = assign(r)
        for i in range(50):
            best = 0
            for j in range(1, 4):
                if r[i, j] > r[i, best]:
                    best = j
            assert a[i] == best


class TestInferRoute:
    def test_closed_form(self):
        c = ClusterCenters(np.array([[1.0, 0.0], [0.0, 1.0]]))
        r = infer_route(c, np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(r, [[math.e / (1 + math.e), 1 / (1 + math.e)]], atol=1e-15)
        np.testing.assert_allclose(r, [[0.7311, 0.2689]], atol=1e-4)

    def test_read_only(self):
        c = init_centers(RoutingConfig(K=3), 4)
        before = c.centers.copy()
        e = np.random.default_rng(0).normal(size=(6, 4))
        a = infer_route(c, e)
        b = infer_route(c, e)
        assert np.array_equal(c.centers, before)
        assert np.array_equal(a, b)

    def test_equals_first_iteration(self):
        cfg = RoutingConfig(K=3, iterations=1, ewma_beta=1 - 1e-12)
        c = init_centers(cfg, 4)
        e = np.random.default_rng(5).normal(size=(9, 4))
        r, _ = route_batch(c, e, cfg)
        np.testing.assert_allclose(infer_route(c, e), r, atol=1e-15)

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            infer_route(init_centers(RoutingConfig(K=2), 3), np.ones((1, 2)))


# -- properties ----------------------------------------------------------------

batches = arrays(np.float64, st.tuples(st.integers(1, 12), st.just(4)),
                 elements=st.floats(-5, 5, allow_nan=False))


@settings(max_examples=60, deadline=None)
@given(e=batches, K=st.integers(1, 5), iterations=st.integers(1, 3), seed=st.integers(0, 1000))
def test_row_stochastic_and_unit_centers(e, K, iterations, seed):
    cfg = RoutingConfig(K=K, iterations=iterations, seed=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateClusterWarning)
        r, c = route_batch(init_centers(cfg, 4), e, cfg)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(r > 0) and np.all(r <= 1)
    np.testing.assert_allclose(np.linalg.norm(c.centers, axis=1), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    cfg = RoutingConfig(K=3, seed=seed)
    c = init_centers(cfg, 5)
    e = rng.normal(size=(10, 5))
    perm = rng.permutation(10)
    r1, c1 = route_batch(c, e, cfg)
    r2, c2 = route_batch(c, e[perm], cfg)
    np.testing.assert_allclose(r2, r1[perm], atol=1e-12)
    np.testing.assert_allclose(c2.centers, c1.centers, atol=1e-12)


def test_scale_sensitivity():
    c = init_centers(RoutingConfig(K=4, seed=2), 3)
    e = np.random.default_rng(0).normal(size=(1, 3))
    s1 = similarity_scores(c, e)
    s3 = similarity_scores(c, 3 * e)
    np.testing.assert_allclose(s3, 3 * s1, atol=1e-14)
    assert assign(infer_route(c, e))[0] == assign(infer_route(c, 3 * e))[0]
    # larger norm sharpens the coefficient row
    assert infer_route(c, 3 * e).max() > infer_route(c, e).max()


def test_ewma_telescoping():
    # a batch made of one point routes to normalize(point) in every iteration,
    # so the inherited center approaches it with ||c_b - c*|| shrinking ~beta per batch
    cfg = RoutingConfig(K=1, iterations=2, ewma_beta=0.9)
    c = ClusterCenters(np.array([[1.0, 0.0, 0.0]]))
    target = unit([0.2, 1.0, -0.3])
    dists = []
    for _ in range(80):
        _, c = route_batch(c, target[None, :] * 2.0, cfg)
        dists.append(np.linalg.norm(c.centers[0] - target))
    assert dists[-1] < 1e-3
    ratios = np.array(dists[40:]) / np.array(dists[39:-1])
    # renormalisation perturbs the ratio at second order; it converges to beta
    np.testing.assert_allclose(ratios, 0.9, atol=5e-5)
    assert abs(ratios[-1] - 0.9) < 1e-7
