import numpy as np
import pytest
from scipy.stats import qmc

from mfbopt.errors import InvalidInputError, NumericalFailureError
from mfbopt.numopt import (
    BoxBounds,
    fd_gradient,
    fd_gradient_batched,
    lbfgs_minimize,
    lbfgs_minimize_batched,
    multistart,
    sobol_sample,
)


class TestBoxBounds:
    def test_validation(self):
        with pytest.raises(InvalidInputError):
            BoxBounds([0.0, 1.0], [1.0])
        with pytest.raises(InvalidInputError):
            BoxBounds([2.0], [1.0])
        with pytest.raises(InvalidInputError):
            BoxBounds([np.inf], [1.0])

    def test_unit_mapping_roundtrip(self):
        b = BoxBounds([-1.0, 2.0], [3.0, 4.0])
        u = np.array([[0.25, 0.5]])
        x = b.from_unit(u)
        np.testing.assert_allclose(x, [[0.0, 3.0]])
        np.testing.assert_allclose(b.to_unit(x), u)

    def test_clip_and_contains(self):
        b = BoxBounds([0.0], [1.0])
        assert b.contains([0.5])
        assert not b.contains([1.5])
        np.testing.assert_allclose(b.clip(np.array([1.5])), [1.0])


def _quad(x):
    return float(np.dot(x, x))


def _quad_grad(x):
    return 2.0 * x


class TestLbfgs:
    def test_convex_quadratic(self):
        res = lbfgs_minimize(_quad, _quad_grad, np.array([1.0, 1.0]))
        assert np.linalg.norm(res.x) < 1e-6

    def test_rosenbrock(self):
        def f(v):
            return float(100.0 * (v[1] - v[0] ** 2) ** 2 + (1 - v[0]) ** 2)

        def g(v):
            return np.array([
                -400.0 * v[0] * (v[1] - v[0] ** 2) - 2.0 * (1 - v[0]),
                200.0 * (v[1] - v[0] ** 2),
            ])

        res = lbfgs_minimize(f, g, np.array([-1.2, 1.0]), tol=1e-10, max_iter=200)
        assert res.fun < 1e-8
        assert res.iterations <= 200

    def test_boundary_minimum(self):
        f = lambda v: float(v[0])
        g = lambda v: np.array([1.0])
        res = lbfgs_minimize(f, g, np.array([0.7]), bounds=BoxBounds([0.0], [1.0]))
        np.testing.assert_allclose(res.x, [0.0], atol=1e-12)

    def test_never_worse_than_start(self):
        # a wiggly objective with many rejected steps
        f = lambda v: float(np.sin(7 * v[0]) + 0.1 * v[0] ** 2)
        g = lambda v: np.array([7 * np.cos(7 * v[0]) + 0.2 * v[0]])
        for x0 in [-2.0, -0.3, 0.8, 2.2]:
            res = lbfgs_minimize(f, g, np.array([x0]), max_iter=30)
            assert res.fun <= f(np.array([x0])) + 1e-15

    def test_nonfinite_start_raises(self):
        f = lambda v: float("nan")
        g = lambda v: np.zeros_like(v)
        with pytest.raises(NumericalFailureError):
            lbfgs_minimize(f, g, np.array([0.0]))


def _double_well(v):
    # minima near x = -1 (depth -1) and x = +1.2 (depth about -1.295)
    x = v[0]
    return float(x ** 4 - 2.2 * x ** 2 - 0.3 * x)


def _double_well_grad(v):
    x = v[0]
    return np.array([4 * x ** 3 - 4.4 * x - 0.3])


class TestMultistart:
    def test_double_well_finds_both(self):
        res = multistart(_double_well, _double_well_grad,
                         [np.array([-1.5]), np.array([1.5])])
        assert len(res) == 2
        assert res[0].fun <= res[1].fun  # global first
        assert res[0].x[0] > 0 and res[1].x[0] < 0

    def test_identical_starts_identical_results(self):
        starts = [np.array([0.9]), np.array([0.9])]
        res = multistart(_double_well, _double_well_grad, starts)
        np.testing.assert_array_equal(res[0].x, res[1].x)

    def test_single_start_equals_lbfgs(self):
        x0 = np.array([1.5])
        a = multistart(_double_well, _double_well_grad, [x0])[0]
        b = lbfgs_minimize(_double_well, _double_well_grad, x0)
        np.testing.assert_array_equal(a.x, b.x)
        assert a.fun == b.fun

    def test_empty_and_all_failing(self):
        with pytest.raises(InvalidInputError):
            multistart(_double_well, _double_well_grad, [])
        bad = lambda v: float("nan")
        with pytest.raises(NumericalFailureError):
            multistart(bad, lambda v: np.zeros(1), [np.array([0.0])])


class TestFdGradient:
    def test_linear_exact(self):
        g = fd_gradient(lambda v: 3.0 * v[0], np.array([0.7]))
        np.testing.assert_allclose(g, [3.0], atol=1e-8)

    def test_square(self):
        g = fd_gradient(lambda v: v[0] ** 2, np.array([2.0]))
        np.testing.assert_allclose(g, [4.0], atol=1e-6)

    def test_constant_zero(self):
        g = fd_gradient(lambda v: 5.0, np.array([1.0, -2.0, 0.3]))
        np.testing.assert_array_equal(g, np.zeros(3))

    def test_batched_matches_scalar(self):
        f = lambda v: float(np.sin(v[0]) + v[1] ** 2)
        fb = lambda X: np.sin(X[:, 0]) + X[:, 1] ** 2
        X = np.array([[0.3, -0.7], [1.1, 0.4]])
        G = fd_gradient_batched(fb, X)
        for i in range(2):
            np.testing.assert_allclose(G[i], fd_gradient(f, X[i]), atol=1e-10)


class TestBatchedLbfgs:
    def test_matches_quadratic_solution(self):
        centers = np.array([[0.2, 0.4], [0.7, 0.1], [0.5, 0.9]])

        def fb(X):
            X = np.atleast_2d(X)
            return np.sum((X - 0.3) ** 2, axis=1)

        xs, fs = lbfgs_minimize_batched(fb, centers, bounds=BoxBounds([0, 0], [1, 1]))
        np.testing.assert_allclose(xs, 0.3, atol=1e-5)
        assert np.all(fs < 1e-9)

    def test_respects_bounds_and_best_per_start(self):
        def fb(X):
            X = np.atleast_2d(X)
            return -np.sum(X, axis=1)  # pushed to the upper corner

        x0 = np.array([[0.1, 0.1], [0.9, 0.2]])
        xs, fs = lbfgs_minimize_batched(fb, x0, bounds=BoxBounds([0, 0], [1, 1]))
        np.testing.assert_allclose(xs, 1.0, atol=1e-9)
        assert np.all(fs <= fb(x0) + 1e-15)

    def test_deterministic(self):
        rng = np.random.default_rng(3)
        x0 = rng.uniform(size=(8, 3))

        def fb(X):
            X = np.atleast_2d(X)
            return np.sum(np.sin(3 * X) + X ** 2, axis=1)

        a = lbfgs_minimize_batched(fb, x0, bounds=BoxBounds([0] * 3, [1] * 3))
        b = lbfgs_minimize_batched(fb, x0, bounds=BoxBounds([0] * 3, [1] * 3))
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestSobol:
    def test_range_contract(self):
        pts = sobol_sample(100, 4, seed=11)
        assert np.all(pts >= 0.0) and np.all(pts < 1.0)
        pts = sobol_sample(100, 4, seed=None)
        assert np.all(pts >= 0.0) and np.all(pts < 1.0)

    def test_dyadic_equidistribution_unscrambled(self):
        # each dimension of the first 2^k points hits every 1/n bin once
        n = 32
        pts = sobol_sample(n, 5)
        for d in range(5):
            bins = np.floor(pts[:, d] * n).astype(int)
            assert sorted(bins) == list(range(n))

    def test_digital_shift_preserves_equidistribution(self):
        n = 64
        pts = sobol_sample(n, 3, seed=123)
        for d in range(3):
            bins = np.floor(pts[:, d] * n).astype(int)
            assert sorted(bins) == list(range(n))

    def test_determinism_and_seed_sensitivity(self):
        a = sobol_sample(50, 6, seed=42)
        b = sobol_sample(50, 6, seed=42)
        c = sobol_sample(50, 6, seed=43)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_high_dimension_supported(self):
        pts = sobol_sample(8, 50, seed=1)
        assert pts.shape == (8, 50)

    def test_invalid_dimension(self):
        with pytest.raises(InvalidInputError):
            sobol_sample(4, 0)
        with pytest.raises(InvalidInputError):
            sobol_sample(4, 30000)

    def test_discrepancy_beats_uniform(self):
        # L2-star discrepancy at n=256, d=3 below the median of 20 uniform draws
        pts = sobol_sample(256, 3)
        d_sobol = qmc.discrepancy(pts, method="L2-star")
        rng = np.random.default_rng(0)
        d_unif = [qmc.discrepancy(rng.uniform(size=(256, 3)), method="L2-star")
                  for _ in range(20)]
        assert d_sobol < np.median(d_unif)
