import numpy as np
import pytest

from mfbopt.errors import InvalidInputError, NumericalFailureError
from mfbopt.kernel import (
    CategoricalSpec,
    KernelParams,
    NuggetVector,
    cholesky_covariance,
    correlation,
    correlation_matrix,
    covariance_matrix,
    embed,
    encode_priors,
)
from mfbopt.types import MixedPoint


def _params(dx=1, omega=0.0, sources=1, theta_z=None, sigma2=1.0, dt_levels=()):
    d_pi_t = sum(dt_levels)
    th = np.zeros((d_pi_t, 2))
    tz = np.zeros((sources, 2)) if theta_z is None else np.asarray(theta_z, dtype=float)
    return KernelParams(omega=np.full(dx, omega), theta_h=th, theta_z=tz, sigma2=sigma2)


class TestEncodePriors:
    def test_single_variable(self):
        np.testing.assert_array_equal(encode_priors([1], [3]), [0, 1, 0])

    def test_two_variables_concatenated(self):
        np.testing.assert_array_equal(encode_priors([0, 1], [2, 2]), [1, 0, 0, 1])

    def test_fidelity_label(self):
        # second of three sources
        np.testing.assert_array_equal(encode_priors([1], [3]), [0, 1, 0])

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            encode_priors([3], [3])
        with pytest.raises(InvalidInputError):
            encode_priors([-1], [3])


class TestEmbed:
    def test_zero_weights(self):
        np.testing.assert_array_equal(embed(np.array([1.0, 0.0]), np.zeros((2, 2))),
                                      np.zeros(2))

    def test_one_hot_selects_weight_row(self):
        w = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(embed(np.array([1.0, 0.0]), w), w[0])
        np.testing.assert_array_equal(embed(np.array([0.0, 1.0]), w), w[1])

    def test_distinct_levels_distinct_latents(self):
        rng = np.random.default_rng(7)
        w = rng.normal(size=(3, 2))
        a = embed(encode_priors([0], [3]), w)
        b = embed(encode_priors([2], [3]), w)
        assert np.linalg.norm(a - b) > 0

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidInputError):
            embed(np.array([1.0, 0.0, 0.0]), np.zeros((2, 2)))


class TestCorrelation:
    def test_identical_points(self):
        spec = CategoricalSpec(sources=2)
        p = _params(dx=2, sources=2)
        u = MixedPoint(x=[0.3, 0.7], source=1)
        assert correlation(u, u, p, spec) == 1.0

    def test_continuous_distance(self):
        spec = CategoricalSpec()
        p = _params(dx=1, omega=0.0)
        r = correlation(MixedPoint(x=[0.0]), MixedPoint(x=[1.0]), p, spec)
        np.testing.assert_allclose(r, np.exp(-1.0), rtol=1e-12)

    def test_latent_distance(self):
        # same x, latent separation 1 in the first coordinate
        spec = CategoricalSpec(sources=2)
        p = _params(dx=1, sources=2, theta_z=[[0.0, 0.0], [1.0, 0.0]])
        r = correlation(MixedPoint(x=[0.5], source=0), MixedPoint(x=[0.5], source=1),
                        p, spec)
        np.testing.assert_allclose(r, np.exp(-1.0), rtol=1e-12)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(0)
        spec = CategoricalSpec(variables=(("c", 3),), sources=2)
        for _ in range(20):
            p = KernelParams(omega=rng.uniform(-2, 2, size=2),
                             theta_h=rng.normal(size=(3, 2)),
                             theta_z=rng.normal(size=(2, 2)),
                             sigma2=float(rng.uniform(0.1, 2)))
            u = MixedPoint(x=rng.uniform(size=2), t=(rng.integers(0, 3),), source=0)
            v = MixedPoint(x=rng.uniform(size=2), t=(rng.integers(0, 3),), source=1)
            r1 = correlation(u, v, p, spec)
            r2 = correlation(v, u, p, spec)
            assert r1 == pytest.approx(r2, abs=1e-15)
            assert 0.0 < r1 <= 1.0

    def test_nonfinite_input(self):
        spec = CategoricalSpec()
        # points reject non-finite coordinates at construction
        with pytest.raises(InvalidInputError):
            MixedPoint(x=[np.nan])
        # and the matrix path validates too
        from mfbopt.kernel import cross_correlation
        with pytest.raises(InvalidInputError):
            cross_correlation(np.array([[np.nan]]), np.zeros((1, 0), int), [0],
                              np.array([[0.0]]), np.zeros((1, 0), int), [0],
                              _params(), spec)

    def test_reduces_to_pure_continuous(self):
        # one source, all embeddings equal: matches the plain Gaussian kernel
        rng = np.random.default_rng(1)
        spec = CategoricalSpec(sources=1)
        omega = rng.uniform(-1, 1, size=3)
        p = KernelParams(omega=omega, theta_h=np.zeros((0, 2)),
                         theta_z=np.zeros((1, 2)), sigma2=1.0)
        x = rng.uniform(size=(6, 3))
        r = correlation_matrix(x, np.zeros((6, 0), int), np.zeros(6, int), p, spec)
        d = x[:, None, :] - x[None, :, :]
        expected = np.exp(-np.einsum("ijk,k->ij", d * d, 10.0 ** omega))
        np.testing.assert_allclose(r, expected, atol=1e-12)


class TestCovariance:
    def test_identical_points_same_source(self):
        spec = CategoricalSpec()
        x = np.array([[0.5], [0.5]])
        c = covariance_matrix(x, np.zeros((2, 0), int), np.zeros(2, int),
                              _params(), NuggetVector(delta=[0.01]), spec)
        np.testing.assert_allclose(c, [[1.01, 1.0], [1.0, 1.01]], atol=1e-15)

    def test_single_point(self):
        spec = CategoricalSpec()
        c = covariance_matrix(np.array([[0.0]]), np.zeros((1, 0), int),
                              np.zeros(1, int), _params(sigma2=2.0),
                              NuggetVector(delta=[0.1]), spec)
        np.testing.assert_allclose(c, [[2.1]], atol=1e-15)

    def test_cross_source_damping(self):
        spec = CategoricalSpec(sources=2)
        p = _params(dx=1, sources=2, theta_z=[[0.0, 0.0], [0.8, 0.3]])
        x = np.array([[0.5], [0.5]])
        c = covariance_matrix(x, np.zeros((2, 0), int), np.array([0, 1]), p,
                              NuggetVector(delta=[0.01, 0.01]), spec)
        expected = np.exp(-(0.8 ** 2 + 0.3 ** 2))
        np.testing.assert_allclose(c[0, 1], expected, rtol=1e-12)
        assert c[0, 1] < p.sigma2

    def test_psd_over_random_draws(self):
        rng = np.random.default_rng(5)
        spec = CategoricalSpec(sources=3)
        for _ in range(10):
            p = KernelParams(omega=rng.uniform(-3, 3, size=2),
                             theta_h=np.zeros((0, 2)),
                             theta_z=rng.normal(size=(3, 2)),
                             sigma2=float(rng.uniform(0.1, 5)))
            x = rng.uniform(size=(12, 2))
            s = rng.integers(0, 3, size=12)
            c = covariance_matrix(x, np.zeros((12, 0), int), s, p,
                                  NuggetVector(delta=rng.uniform(1e-6, 1e-2, 3)), spec)
            np.linalg.cholesky(c)  # raises if not PD

    def test_permutation_consistency(self):
        rng = np.random.default_rng(9)
        spec = CategoricalSpec(sources=2)
        p = _params(dx=2, sources=2, theta_z=[[0.0, 0.0], [1.0, 0.5]])
        x = rng.uniform(size=(7, 2))
        s = rng.integers(0, 2, size=7)
        nug = NuggetVector(delta=[1e-4, 1e-3])
        c = covariance_matrix(x, np.zeros((7, 0), int), s, p, nug, spec)
        perm = rng.permutation(7)
        cp = covariance_matrix(x[perm], np.zeros((7, 0), int), s[perm], p, nug, spec)
        np.testing.assert_allclose(cp, c[np.ix_(perm, perm)], atol=1e-15)


class TestNuggetEscalation:
    def test_floor_applied(self):
        nv = NuggetVector(delta=[0.0, 1e-12])
        assert np.all(nv.delta >= 1e-8)

    def test_unknown_source_label(self):
        nv = NuggetVector(delta=[1e-4])
        with pytest.raises(InvalidInputError):
            nv.per_point(np.array([1]))

    def test_escalation_recovers_mild_indefiniteness(self):
        corr = np.array([[1.0, 1.0005], [1.0005, 1.0]])  # eigenvalue -5e-4
        L, nug, floor = cholesky_covariance(corr, 1.0, np.full(2, 1e-8))
        assert floor > 1e-8
        np.testing.assert_allclose(L @ L.T, corr + np.diag(nug), atol=1e-12)

    def test_escalation_gives_up(self):
        corr = np.array([[1.0, 1.05], [1.05, 1.0]])  # eigenvalue -0.05 > max floor
        with pytest.raises(NumericalFailureError):
            cholesky_covariance(corr, 1.0, np.full(2, 1e-8))
