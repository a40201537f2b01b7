"""Analytic NNGP / NTK / ARK recursions.

Oracles: Monte Carlo over bivariate normals (closed-form moments), a
layer recursion for Erf networks with expectations by numerical quadrature
(independent of the arcsine formulas), and central finite differences for
input gradients.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.polynomial.hermite_e import hermegauss
from scipy.integrate import dblquad, quad
from scipy.special import erf

from ntkat.kernels import (
    Activation,
    BivariateMoment,
    KernelGram,
    NetSpec,
    NumericalBreakdown,
    _kernel_pass,
    ark_diag,
    ark_theta_x,
    contract_partials,
    gauss_dd,
    gauss_ee,
    nngp_sigma,
    ntk_cross,
    ntk_cross_partials,
    ntk_grad_x,
    ntk_gram,
    ntk_theta,
)

ERF = Activation.ERF
RELU = Activation.RELU


def _gh_expect(g, s11, s12, s22, n=200):
    """E[g(u, v)] for a centred Gaussian pair by tensor Gauss-Hermite quadrature."""
    z, w = hermegauss(n)
    w = w / np.sqrt(2 * np.pi)
    l11 = np.sqrt(s11)
    l21 = s12 / l11
    l22 = np.sqrt(max(s22 - l21 ** 2, 0.0))
    z1, z2 = np.meshgrid(z, z, indexing="ij")
    u = l11 * z1
    v = l21 * z1 + l22 * z2
    return float(np.sum(np.outer(w, w) * g(u, v)))


def _quad_expect(g, s11, s12, s22):
    """E[g(u, v)] by nested adaptive quadrature in standardised coordinates.

    Used by the layer recursion, where variances reach ~10 and 200-node
    Gauss-Hermite stalls near 1e-10 relative error.
    """
    l11 = np.sqrt(s11)
    l21 = s12 / l11
    l22 = np.sqrt(max(s22 - l21 ** 2, 0.0))

    def f(z2, z1):
        return g(l11 * z1, l21 * z1 + l22 * z2) * np.exp(-0.5 * (z1 * z1 + z2 * z2)) / (2 * np.pi)

    return dblquad(f, -np.inf, np.inf, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13)[0]


def _diag_expect(g, s):
    """E[g(u)] for u ~ N(0, s) by adaptive quadrature.

    Gauss-Hermite converges slowly for erf(u)**2 at large ``s``, where the
    integrand is nearly a step in the standardised variable.
    """
    f = lambda z: g(np.sqrt(s) * z) * np.exp(-0.5 * z * z) / np.sqrt(2 * np.pi)
    return quad(f, -np.inf, np.inf, epsabs=1e-14, epsrel=1e-13, limit=200)[0]


def _erf_prime(h):
    return 2.0 / np.sqrt(np.pi) * np.exp(-h ** 2)


def _quad_kernels(spec, x, x2):
    """Layer recursion with quadrature expectations (Erf only)."""
    d = len(x)
    sw2, sb2 = spec.sigma_w ** 2, spec.sigma_b ** 2
    p, q, r = x @ x / d, x @ x2 / d, x2 @ x2 / d
    s11, s12, s22 = sw2 * p + sb2, sw2 * q + sb2, sw2 * r + sb2
    theta, ark = q + 1.0, sw2
    for _ in range(spec.depth):
        ee = _quad_expect(lambda u, v: erf(u) * erf(v), s11, s12, s22)
        dd = _quad_expect(lambda u, v: _erf_prime(u) * _erf_prime(v), s11, s12, s22)
        e11 = _diag_expect(lambda u: erf(u) ** 2, s11)
        e22 = _diag_expect(lambda u: erf(u) ** 2, s22)
        theta = sw2 * theta * dd + ee + 1.0
        ark = sw2 * ark * dd
        s11, s12, s22 = sw2 * e11 + sb2, sw2 * ee + sb2, sw2 * e22 + sb2
    return s12, theta, ark


@pytest.fixture(scope="module")
def normals():
    rng = np.random.default_rng(20240601)
    return rng.standard_normal((2, 10_000_000))


def _random_moment(rng):
    s11, s22 = rng.uniform(0.2, 3.0, size=2)
    rho = rng.uniform(-0.95, 0.95)
    return BivariateMoment(s11, rho * np.sqrt(s11 * s22), s22)


def _mc(act, m, z):
    l11 = np.sqrt(m.s11)
    l21 = m.s12 / l11
    l22 = np.sqrt(m.s22 - l21 ** 2)
    u = l11 * z[0]
    v = l21 * z[0] + l22 * z[1]
    if act is RELU:
        ee = np.maximum(u, 0) * np.maximum(v, 0)
        dd = ((u > 0) & (v > 0)).astype(float)
    else:
        ee = erf(u) * erf(v)
        dd = _erf_prime(u) * _erf_prime(v)
    n = len(u)
    return (ee.mean(), ee.std() / np.sqrt(n)), (dd.mean(), dd.std() / np.sqrt(n))


class TestGaussianMoments:
    def test_relu_perfect_correlation(self):
        m = BivariateMoment(1.0, 1.0, 1.0)
        assert gauss_ee(RELU, m) == pytest.approx(0.5, abs=1e-15)
        assert gauss_dd(RELU, m) == pytest.approx(0.5, abs=1e-15)

    def test_relu_independent(self, normals):
        m = BivariateMoment(1.0, 0.0, 1.0)
        assert gauss_ee(RELU, m) == pytest.approx(1 / (2 * np.pi), rel=1e-14)
        assert gauss_dd(RELU, m) == pytest.approx(0.25, rel=1e-14)
        (ee, se_e), (dd, se_d) = _mc(RELU, m, normals)
        assert abs(ee - 1 / (2 * np.pi)) < 4 * se_e
        assert abs(dd - 0.25) < 4 * se_d

    def test_erf_independent_is_zero(self):
        assert gauss_ee(ERF, BivariateMoment(1.0, 0.0, 1.0)) == 0.0

    @pytest.mark.parametrize("act", [ERF, RELU])
    def test_monte_carlo_20_moments(self, act, normals):
        rng = np.random.default_rng(7)
        for _ in range(20):
            m = _random_moment(rng)
            (ee, se_e), (dd, se_d) = _mc(act, m, normals)
            assert abs(gauss_ee(act, m) - ee) < 4 * se_e, m
            assert abs(gauss_dd(act, m) - dd) < 4 * se_d, m

    def test_erf_quadrature(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            m = _random_moment(rng)
            ee = _gh_expect(lambda u, v: erf(u) * erf(v), m.s11, m.s12, m.s22)
            dd = _gh_expect(lambda u, v: _erf_prime(u) * _erf_prime(v), m.s11, m.s12, m.s22)
            np.testing.assert_allclose(gauss_ee(ERF, m), ee, rtol=1e-10, atol=1e-13)
            np.testing.assert_allclose(gauss_dd(ERF, m), dd, rtol=1e-10)

    def test_cauchy_schwarz_violation_rejected(self):
        with pytest.raises(NumericalBreakdown):
            BivariateMoment(1.0, 1.1, 1.0)
        BivariateMoment(1.0, 1.0 + 1e-13, 1.0)  # inside the 1e-12 tolerance

    def test_negative_variance_rejected(self):
        with pytest.raises(ValueError):
            BivariateMoment(-1.0, 0.0, 1.0)

    def test_degenerate_variance(self):
        m = BivariateMoment(0.0, 0.0, 2.0)
        assert gauss_ee(RELU, m) == 0.0
        assert gauss_ee(ERF, m) == 0.0
        assert gauss_dd(ERF, m) == pytest.approx((4 / np.pi) / np.sqrt(5.0))

    def test_degenerate_variance_with_covariance_is_error(self):
        with pytest.raises((ValueError, NumericalBreakdown)):
            gauss_ee(RELU, BivariateMoment(0.0, 1e-3, 2.0))


class TestNngpSigma:
    def test_first_layer_at_origin(self):
        spec = NetSpec(3, 5)
        assert nngp_sigma(spec, 1, np.zeros(5), np.zeros(5)) == pytest.approx(0.18 ** 2)

    def test_first_layer_ones(self):
        spec = NetSpec(2, 7, sigma_w=1.0, sigma_b=0.0)
        assert nngp_sigma(spec, 1, np.ones(7), np.ones(7)) == 1.0

    def test_layer_three_monte_carlo(self):
        spec = NetSpec(3, 6)
        rng = np.random.default_rng(11)
        x, x2 = rng.standard_normal((2, 6))
        x, x2 = x / np.linalg.norm(x), x2 / np.linalg.norm(x2)
        s = [nngp_sigma(spec, 2, a, b) for a, b in ((x, x), (x, x2), (x2, x2))]
        z = rng.standard_normal((2, 1_000_000))
        l11 = np.sqrt(s[0])
        l21 = s[1] / l11
        u, v = l11 * z[0], l21 * z[0] + np.sqrt(s[2] - l21 ** 2) * z[1]
        samples = spec.sigma_w ** 2 * erf(u) * erf(v) + spec.sigma_b ** 2
        se = samples.std() / np.sqrt(len(samples))
        assert abs(nngp_sigma(spec, 3, x, x2) - samples.mean()) < 3 * se

    def test_quadrature_recursion(self):
        spec = NetSpec(3, 4)
        rng = np.random.default_rng(5)
        x, x2 = rng.standard_normal((2, 4))
        s_q, _, _ = _quad_kernels(spec, x, x2)
        np.testing.assert_allclose(nngp_sigma(spec, 4, x, x2), s_q, rtol=1e-10)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            nngp_sigma(NetSpec(1, 2), 1, np.array([np.nan, 0.0]), np.zeros(2))

    def test_layer_bounds(self):
        with pytest.raises(ValueError):
            nngp_sigma(NetSpec(1, 2), 0, np.zeros(2), np.zeros(2))
        with pytest.raises(ValueError):
            nngp_sigma(NetSpec(1, 2), 3, np.zeros(2), np.zeros(2))


class TestNtkAndArk:
    def test_frozen_values(self):
        # Frozen from the quadrature recursion (test_quadrature_recursion).
        spec = NetSpec(2, 3)
        x = np.array([0.3, -1.2, 0.8])
        x2 = np.array([1.0, 0.5, -0.4])
        _, th, ark = _quad_kernels(spec, x, x2)
        np.testing.assert_allclose(ntk_theta(spec, x, x2), th, rtol=1e-10)
        np.testing.assert_allclose(ark_theta_x(spec, x, x2), ark, rtol=1e-10)
        np.testing.assert_allclose(th, 2.19482381575614, rtol=1e-12)
        np.testing.assert_allclose(ark, 2.35024653715732, rtol=1e-12)

    @pytest.mark.parametrize("depth", [1, 3])
    def test_quadrature_recursion(self, depth):
        spec = NetSpec(depth, 5)
        rng = np.random.default_rng(depth)
        x, x2 = rng.standard_normal((2, 5))
        _, th, ark = _quad_kernels(spec, x, x2)
        np.testing.assert_allclose(ntk_theta(spec, x, x2), th, rtol=1e-10)
        np.testing.assert_allclose(ark_theta_x(spec, x, x2), ark, rtol=1e-10)

    def test_base_case(self):
        spec = NetSpec(2, 3)
        out = _kernel_pass(spec, 0.0, 0.0, 0.0, n_layers=0)
        assert float(out.theta) == 1.0
        assert float(out.ark) == spec.sigma_w ** 2

    def test_ark_relu_one_layer(self):
        spec = NetSpec(1, 4, activation="relu", sigma_w=1.3)
        x = np.array([0.5, -1.0, 2.0, 0.1])
        assert ark_theta_x(spec, x, x) == pytest.approx(1.3 ** 4 / 2, rel=1e-14)

    def test_ntk_lower_bound(self):
        rng = np.random.default_rng(0)
        for act in ("erf", "relu"):
            spec = NetSpec(4, 3, activation=act)
            for x in rng.standard_normal((10, 3)):
                assert ntk_theta(spec, x, x) >= spec.depth + 1

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (2, 4), elements=st.floats(-3, 3)),
           st.sampled_from(["erf", "relu"]), st.integers(1, 4))
    def test_symmetry_and_positivity(self, xx, act, depth):
        spec = NetSpec(depth, 4, activation=act)
        a = ntk_theta(spec, xx[0], xx[1])
        b = ntk_theta(spec, xx[1], xx[0])
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
        assert ark_theta_x(spec, xx[0], xx[0]) > 0
        # Cauchy-Schwarz for a positive semidefinite kernel
        assert a ** 2 <= ntk_theta(spec, xx[0], xx[0]) * ntk_theta(spec, xx[1], xx[1]) * (1 + 1e-10)

    def test_independent_of_hidden_width(self):
        x, x2 = np.eye(3)[:2]
        assert ntk_theta(NetSpec(2, 3, hidden_width=7), x, x2) == ntk_theta(NetSpec(2, 3), x, x2)


class TestGram:
    def _xs(self, m=16, d=6, seed=0):
        return np.random.default_rng(seed).standard_normal((m, d))

    @pytest.mark.parametrize("act", ["erf", "relu"])
    def test_symmetric_psd(self, act):
        g = ntk_gram(NetSpec(3, 6, activation=act), self._xs()).scalars
        np.testing.assert_array_equal(g, g.T)
        lam = np.linalg.eigvalsh(g)
        assert lam[0] >= -1e-8 * lam[-1]

    def test_entries_match_pairwise(self):
        spec = NetSpec(2, 6)
        xs = self._xs(5)
        g = ntk_gram(spec, xs).scalars
        ref = np.array([[ntk_theta(spec, a, b) for b in xs] for a in xs])
        np.testing.assert_allclose(g, ref, rtol=1e-14)
        np.testing.assert_allclose(ark_diag(spec, xs), [ark_theta_x(spec, a, a) for a in xs],
                                   rtol=1e-14)

    def test_single_point(self):
        spec = NetSpec(2, 6)
        x = self._xs(1)
        assert ntk_gram(spec, x).scalars[0, 0] == pytest.approx(ntk_theta(spec, x[0], x[0]), rel=1e-15)

    def test_materialize_is_kronecker(self):
        g = KernelGram(np.array([[2.0, 0.5], [0.5, 1.0]]), 3)
        np.testing.assert_array_equal(g.materialize(), np.kron(g.scalars, np.eye(3)))
        assert g.m == 2

    def test_cross_consistent_with_gram(self):
        spec = NetSpec(2, 6)
        xs = self._xs(6)
        np.testing.assert_allclose(ntk_cross(spec, xs, xs), ntk_gram(spec, xs).scalars, rtol=1e-14)


class TestNtkGradX:
    @staticmethod
    def _fd(spec, x, x2, h=1e-5):
        g = np.empty_like(x)
        for k in range(len(x)):
            e = np.zeros_like(x)
            e[k] = h
            g[k] = (ntk_theta(spec, x + e, x2) - ntk_theta(spec, x - e, x2)) / (2 * h)
        return g

    def test_fifty_random_erf_instances(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            d = int(rng.integers(2, 8))
            spec = NetSpec(int(rng.integers(1, 4)), d)
            x, x2 = rng.standard_normal((2, d))
            g = ntk_grad_x(spec, x, x2)
            fd = self._fd(spec, x, x2)
            assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5

    def test_relu_matches_fd(self):
        rng = np.random.default_rng(1)
        spec = NetSpec(2, 5, activation="relu")
        x, x2 = rng.standard_normal((2, 5))
        fd = self._fd(spec, x, x2)
        assert np.linalg.norm(ntk_grad_x(spec, x, x2) - fd) / np.linalg.norm(fd) < 1e-5

    def test_base_case_gradient(self):
        spec = NetSpec(1, 4)
        x = np.zeros((1, 4))
        x2 = np.array([[1.0, -2.0, 0.5, 3.0]])
        out = _kernel_pass(spec, 0.0, 0.0, float(x2[0] @ x2[0]) / 4, grad=True, n_layers=0)
        g = contract_partials(x, x2, np.atleast_2d(out.dtheta_dp), np.atleast_2d(out.dtheta_dq),
                              np.ones((1, 1)))
        np.testing.assert_allclose(g[0], x2[0] / 4, rtol=1e-15)

    def test_diagonal_is_twice_partial(self):
        spec = NetSpec(3, 4)
        x = np.array([0.2, -0.7, 1.1, 0.4])
        h = 1e-5
        fd = np.array([(ntk_theta(spec, x + h * e, x + h * e) - ntk_theta(spec, x - h * e, x - h * e))
                       / (2 * h) for e in np.eye(4)])
        np.testing.assert_allclose(2 * ntk_grad_x(spec, x, x), fd, rtol=1e-6)

    def test_relu_collinear_one_sided(self):
        spec = NetSpec(2, 3, activation="relu")
        x = np.array([1.0, 2.0, -1.0])
        g = ntk_grad_x(spec, x, 2.0 * x)
        assert np.all(np.isfinite(g))

    def test_batched_partials_match_pointwise(self):
        spec = NetSpec(2, 5)
        rng = np.random.default_rng(9)
        xs, anchors = rng.standard_normal((3, 5)), rng.standard_normal((4, 5))
        theta, dp, dq = ntk_cross_partials(spec, xs, anchors)
        coef = rng.standard_normal((3, 4))
        g = contract_partials(xs, anchors, dp, dq, coef)
        ref = np.array([sum(coef[i, j] * ntk_grad_x(spec, xs[i], anchors[j]) for j in range(4))
                        for i in range(3)])
        np.testing.assert_allclose(g, ref, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(theta, ntk_cross(spec, xs, anchors), rtol=1e-14)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            ntk_grad_x(NetSpec(1, 2), np.array([np.inf, 0.0]), np.zeros(2))


class TestNetSpec:
    @pytest.mark.parametrize("kw", [dict(depth=0), dict(input_dim=0), dict(output_dim=0),
                                    dict(sigma_w=0.0), dict(sigma_b=-0.1), dict(hidden_width=0)])
    def test_invalid(self, kw):
        base = dict(depth=1, input_dim=2)
        with pytest.raises(ValueError):
            NetSpec(**(base | kw))

    def test_round_trip(self):
        spec = NetSpec(3, 4, 2, "relu", 1.5, 0.1, 64)
        assert NetSpec.from_dict(spec.to_dict()) == spec
        assert spec.widths == [4, 64, 64, 64, 2]
