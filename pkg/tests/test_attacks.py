"""l-infinity PGD."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntkat.attacks import PgdConfig, pgd_linf, project_linf


def _linear(w):
    # loss 0.5 (w.x - y)^2
    return lambda x, y: (x @ w - y)[..., None] * w


class TestPgdConfig:
    def test_default_alpha(self):
        assert PgdConfig(0.1).alpha == pytest.approx(0.02)
        assert PgdConfig(0.3, steps=3).alpha == pytest.approx(0.2)

    def test_invalid(self):
        with pytest.raises(ValueError):
            PgdConfig(-0.1)
        with pytest.raises(ValueError):
            PgdConfig(0.1, steps=0)
        with pytest.raises(ValueError):
            PgdConfig(0.1, alpha=0.0)
        with pytest.raises(ValueError):
            PgdConfig(0.1, clamp_box=(1.0, 0.0))

    def test_rho_zero_allows_zero_alpha(self):
        assert PgdConfig(0.0).alpha == 0.0


class TestPgd:
    def test_rho_zero_identity(self):
        x = np.array([0.3, -2.0, 5.0])
        out = pgd_linf(x, 1.0, lambda *_: np.ones(3), PgdConfig(0.0))
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_linear_one_step(self):
        w = np.array([1.5, -0.5, 0.0, 2.0])
        x = np.array([0.1, 0.2, 0.3, -0.4])
        y = 3.0
        cfg = PgdConfig(0.5, steps=1, alpha=0.1)
        out = pgd_linf(x, y, _linear(w), cfg)
        want = x + 0.1 * np.sign(w * (w @ x - y))
        np.testing.assert_allclose(out, want, rtol=0, atol=1e-15)
        assert out[2] == x[2]  # sign(0) = 0

    def test_saturates_at_corner(self):
        w = np.array([1.0, -1.0])
        x = np.zeros(2)
        out = pgd_linf(x, 5.0, _linear(w), PgdConfig(0.25))
        np.testing.assert_allclose(out, [-0.25, 0.25])

    def test_ascent_on_quadratics(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            d = rng.integers(2, 8)
            b = rng.standard_normal((d, d))
            q = b @ b.T + 0.1 * np.eye(d)
            x0 = rng.standard_normal(d)
            x = rng.standard_normal(d)
            loss = lambda z: 0.5 * (z - x0) @ q @ (z - x0)
            out = pgd_linf(x, None, lambda z, _: q @ (z - x0), PgdConfig(0.3))
            assert loss(out) >= loss(x)

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal(5)
        xs = rng.standard_normal((4, 5))
        ys = rng.standard_normal(4)
        cfg = PgdConfig(0.2)
        batch = pgd_linf(xs, ys, _linear(w), cfg)
        rows = np.stack([pgd_linf(x, y, _linear(w), cfg) for x, y in zip(xs, ys)])
        np.testing.assert_array_equal(batch, rows)

    def test_clamp_box(self):
        x = np.array([0.0, 0.5, 1.0])
        out = pgd_linf(x, 0.0, lambda z, _: np.array([-1.0, 1.0, 1.0]), PgdConfig(0.1, clamp_box=(0, 1)))
        np.testing.assert_allclose(out, [0.0, 0.6, 1.0])

    def test_random_start_needs_rng(self):
        with pytest.raises(ValueError):
            pgd_linf(np.zeros(2), 0.0, lambda z, _: z, PgdConfig(0.1, random_start=True))

    def test_random_start_deterministic(self):
        cfg = PgdConfig(0.1, random_start=True)
        g = lambda z, _: np.zeros_like(z)
        a = pgd_linf(np.zeros(3), 0.0, g, cfg, np.random.default_rng(4))
        b = pgd_linf(np.zeros(3), 0.0, g, cfg, np.random.default_rng(4))
        np.testing.assert_array_equal(a, b)
        assert np.max(np.abs(a)) <= 0.1


class TestProjection:
    def test_rounding_case_needs_nudge(self):
        # fl(x + rho) - x exceeds rho for these values, so the plain clip is not enough.
        x = np.array([0.1])
        rho = 0.2
        assert (np.clip(x + 1.0, x - rho, x + rho) - x)[0] > rho
        out = project_linf(x + 1.0, x, rho)
        assert abs(out[0] - x[0]) <= rho

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
           arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
           st.floats(0.0, 10.0))
    def test_exact_bound(self, x, z, rho):
        out = project_linf(z, x, rho)
        assert np.all(np.abs(out - x) <= rho)
