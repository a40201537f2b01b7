"""Closed-form adversarial-training dynamics of linearised wide networks.

Notation follows the rest of the package: ``M`` training points with ``c``
outputs each, stacked sample-major into vectors of length ``M c``.  The
linearised model trained by gradient flow against gradient-flow adversaries
evolves as

    f_t(x) = f_0(x) - Theta(x, X) Theta(X, X)^-1 (I - exp(-Theta(X, X) Xi(t))) (f_0(X) - y)

with the block-diagonal regularisation matrix

    Xi(t) = Diag_i( int_0^t exp(Theta_x(x_i, x_i) eta_i(tau) S) dtau ).

The formula is exact when every ``eta_i`` is constant in time; for
time-varying rates the products ``Theta Xi'(t)`` at different times need not
commute and it is the leading Magnus term only.  :func:`ode_oracle_linearized`
integrates the underlying flows directly and is the independent check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .kernels import KernelGram, NetSpec, ark_diag, ntk_gram
from .matfun import expm, sym_expm

__all__ = [
    "ConstantRate",
    "PiecewiseLinearRate",
    "SinusoidRate",
    "RateSchedule",
    "LinearizedState",
    "SingularGramError",
    "XiMatrix",
    "xi_matrix",
    "at_closed_form",
    "standard_closed_form",
    "standard_limit",
    "ensemble_mean_inf",
    "ode_oracle_linearized",
    "Decomposition",
    "degeneration_decompose",
    "DegenerationReport",
    "degeneration_limit_check",
    "geometric_t_grid",
]


# ---------------------------------------------------------------------------
# Adversarial learning-rate schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstantRate:
    value: float

    constant = True

    def __call__(self, t):
        return np.full(np.shape(t), float(self.value)) if np.ndim(t) else float(self.value)

    def derivative(self, t):
        return np.zeros(np.shape(t)) if np.ndim(t) else 0.0

    def to_dict(self):
        return {"kind": "constant", "value": self.value}


@dataclass(frozen=True)
class PiecewiseLinearRate:
    """Linear interpolation through ``(times, values)``, held flat outside."""

    times: tuple
    values: tuple

    constant = False

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.ndim != 1 or t.shape != v.shape or len(t) < 1:
            raise ValueError("times and values must be equal-length 1-d sequences")
        if np.any(np.diff(t) <= 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("non-finite rate table")

    def __call__(self, t):
        return np.interp(t, self.times, self.values)

    def slopes(self):
        t = np.asarray(self.times)
        v = np.asarray(self.values)
        return np.concatenate([[0.0], np.diff(v) / np.diff(t), [0.0]])

    def derivative(self, t):
        idx = np.searchsorted(self.times, t, side="right")
        return self.slopes()[idx]

    @property
    def has_kinks(self) -> bool:
        return bool(np.any(np.abs(np.diff(self.slopes())) > 0))

    def to_dict(self):
        return {"kind": "piecewise_linear", "times": list(self.times), "values": list(self.values)}


@dataclass(frozen=True)
class SinusoidRate:
    """``a + b sin(omega t)``."""

    a: float
    b: float
    omega: float

    constant = False

    def __call__(self, t):
        return self.a + self.b * np.sin(self.omega * np.asarray(t, dtype=float))

    def derivative(self, t):
        return self.b * self.omega * np.cos(self.omega * np.asarray(t, dtype=float))

    def to_dict(self):
        return {"kind": "sinusoid", "a": self.a, "b": self.b, "omega": self.omega}


def rate_from_dict(d) -> ConstantRate | PiecewiseLinearRate | SinusoidRate:
    if isinstance(d, (int, float)):
        return ConstantRate(float(d))
    kind = d.get("kind")
    if kind == "constant":
        return ConstantRate(float(d["value"]))
    if kind == "piecewise_linear":
        return PiecewiseLinearRate(tuple(d["times"]), tuple(d["values"]))
    if kind == "sinusoid":
        return SinusoidRate(float(d["a"]), float(d["b"]), float(d["omega"]))
    raise ValueError(f"unknown rate kind {kind!r}")


class RateSchedule:
    """Per-sample adversarial learning rates ``eta_i(t)`` and search horizon ``S``.

    Rates must be continuous with continuous derivative.  Piecewise-linear
    tables with slope changes violate the latter and are rejected unless
    ``allow_kinks`` is set.
    """

    def __init__(self, etas: Sequence, horizon: float, allow_kinks: bool = False):
        self.etas = tuple(etas)
        self.horizon = float(horizon)
        if not len(self.etas):
            raise ValueError("need at least one rate")
        if not (math.isfinite(self.horizon) and self.horizon >= 0):
            raise ValueError("horizon S must be finite and >= 0")
        for e in self.etas:
            if isinstance(e, ConstantRate) and not math.isfinite(e.value):
                raise ValueError("non-finite constant rate")
            if isinstance(e, SinusoidRate) and not all(map(math.isfinite, (e.a, e.b, e.omega))):
                raise ValueError("non-finite sinusoid rate")
            if isinstance(e, PiecewiseLinearRate) and e.has_kinks and not allow_kinks:
                raise ValueError("piecewise-linear rate has a discontinuous derivative")

    @classmethod
    def constant(cls, m: int, eta: float, horizon: float) -> "RateSchedule":
        return cls([ConstantRate(float(eta))] * m, horizon)

    @classmethod
    def from_values(cls, etas: Sequence[float], horizon: float) -> "RateSchedule":
        return cls([ConstantRate(float(e)) for e in etas], horizon)

    def __len__(self):
        return len(self.etas)

    @property
    def all_constant(self) -> bool:
        return all(e.constant for e in self.etas)

    def values(self, t: float) -> np.ndarray:
        return np.array([float(e(t)) for e in self.etas])

    def to_dict(self):
        return {"horizon_S": self.horizon, "etas": [e.to_dict() for e in self.etas]}


# ---------------------------------------------------------------------------
# Linearised state
# ---------------------------------------------------------------------------

class SingularGramError(np.linalg.LinAlgError):
    pass


@dataclass
class LinearizedState:
    """Kernels and outputs at initialisation, with a cached Cholesky factor.

    ``gram`` is the full ``(Mc, Mc)`` NTK Gram, ``ark_blocks`` the ``(M, c, c)``
    per-sample ARK blocks, ``f0_train`` and ``y`` are length ``Mc``.
    """

    gram: np.ndarray
    ark_blocks: np.ndarray
    f0_train: np.ndarray
    y: np.ndarray
    jitter: float = 0.0
    min_eig_ratio: float = 1e-10
    _chol: tuple = field(init=False, repr=False)

    def __post_init__(self):
        self.gram = np.asarray(self.gram, dtype=float)
        self.ark_blocks = np.asarray(self.ark_blocks, dtype=float)
        if self.ark_blocks.ndim == 1:
            self.ark_blocks = self.ark_blocks[:, None, None]
        m, c, _ = self.ark_blocks.shape
        n = m * c
        self.f0_train = np.asarray(self.f0_train, dtype=float).reshape(n)
        self.y = np.asarray(self.y, dtype=float).reshape(n)
        if self.gram.shape != (n, n):
            raise ValueError(f"gram shape {self.gram.shape} does not match {m} samples x {c} outputs")
        if self.jitter:
            self.gram = self.gram + self.jitter * np.eye(n)
        lam = np.linalg.eigvalsh(self.gram)
        if lam[0] <= self.min_eig_ratio * lam[-1]:
            raise SingularGramError(
                f"NTK Gram is singular: min eigenvalue {lam[0]:.3e}, max {lam[-1]:.3e}")
        self._chol = scipy.linalg.cho_factor(self.gram)

    @property
    def m(self) -> int:
        return self.ark_blocks.shape[0]

    @property
    def c(self) -> int:
        return self.ark_blocks.shape[1]

    @property
    def residual0(self) -> np.ndarray:
        return self.f0_train - self.y

    def solve(self, v):
        return scipy.linalg.cho_solve(self._chol, v)

    def ark_dense(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.ark_blocks)

    @classmethod
    def from_network(cls, params, xs, ys, **kw) -> "LinearizedState":
        """Empirical kernels and outputs of a finite network at initialisation."""
        from .finite_net import empirical_ark_diag, empirical_ntk, forward

        xs = np.asarray(xs, dtype=float)
        f0 = forward(params, xs)[0]
        return cls(empirical_ntk(params, xs), empirical_ark_diag(params, xs),
                   f0.ravel(), np.asarray(ys).ravel(), **kw)

    @classmethod
    def from_kernels(cls, spec: NetSpec, xs, ys, f0=None, **kw) -> "LinearizedState":
        """Infinite-width kernels; ``f0`` defaults to zero (the ensemble mean)."""
        xs = np.asarray(xs, dtype=float)
        c = spec.output_dim
        gram = ntk_gram(spec, xs).materialize()
        ark = ark_diag(spec, xs)[:, None, None] * np.eye(c)
        f0 = np.zeros(xs.shape[0] * c) if f0 is None else f0
        return cls(gram, ark, f0, ys, **kw)


@dataclass
class XiMatrix:
    blocks: np.ndarray    # (M, c, c)
    t: float

    def dense(self) -> np.ndarray:
        return scipy.linalg.block_diag(*self.blocks)


def _simpson(values, h):
    """Composite Simpson along the last axis; ``values`` has an odd count."""
    return h / 3.0 * (values[..., 0] + values[..., -1]
                      + 4.0 * values[..., 1:-1:2].sum(axis=-1)
                      + 2.0 * values[..., 2:-1:2].sum(axis=-1))


def _rate_integrals(lams, sched, t, quad_steps, exact_constant=True):
    """``int_0^t exp(lam * eta_i(tau) * S) dtau`` for each sample's eigenvalues.

    ``lams`` has shape ``(M, k)``; returns the same shape.
    """
    if quad_steps < 2 or quad_steps % 2:
        raise ValueError("quad_steps must be an even integer >= 2")
    if t < 0:
        raise ValueError("t must be >= 0")
    S = sched.horizon
    out = np.empty_like(lams)
    tau = np.linspace(0.0, t, quad_steps + 1)
    h = t / quad_steps
    for i, eta in enumerate(sched.etas):
        if exact_constant and eta.constant:
            out[i] = t * np.exp(lams[i] * eta.value * S)
        else:
            vals = np.exp(lams[i][:, None] * np.asarray(eta(tau))[None, :] * S)
            out[i] = _simpson(vals, h)
    return out


def _ark_eig(state):
    lam, u = np.linalg.eigh(state.ark_blocks)
    return lam, u


def xi_matrix(state: LinearizedState, sched: RateSchedule, t: float, quad_steps: int = 64,
              exact_constant: bool = True) -> XiMatrix:
    """Regularisation matrix ``Xi(t)`` as per-sample ``c x c`` blocks.

    Each ARK block is symmetric, so the integrand ``exp(B_i eta_i(tau) S)``
    shares the eigenvectors of ``B_i`` and only the scalar integrals need
    quadrature.
    """
    if len(sched) != state.m:
        raise ValueError(f"schedule has {len(sched)} rates for {state.m} samples")
    lam, u = _ark_eig(state)
    ints = _rate_integrals(lam, sched, t, quad_steps, exact_constant)
    blocks = np.einsum("mij,mj,mkj->mik", u, ints, u)
    return XiMatrix(blocks, t)


def at_closed_form(state: LinearizedState, xi: XiMatrix, ntk_cross_test, f0_test) -> np.ndarray:
    """Linearised AT output at test points.

    ``ntk_cross_test`` is ``Theta(x, X)`` with shape ``(N c, M c)``;
    ``f0_test`` has length ``N c``.
    """
    expo = expm(-state.gram @ xi.dense())
    r0 = state.residual0
    w = state.solve(r0 - expo @ r0)
    return np.asarray(f0_test, dtype=float) - np.asarray(ntk_cross_test) @ w


def standard_closed_form(state: LinearizedState, t: float, ntk_cross_test, f0_test) -> np.ndarray:
    """Plain gradient-flow training (no adversary), via the Gram eigenbasis."""
    lam, u = np.linalg.eigh(state.gram)
    r0 = state.residual0
    coef = u @ ((-np.expm1(-lam * t) / lam) * (u.T @ r0))
    return np.asarray(f0_test, dtype=float) - np.asarray(ntk_cross_test) @ coef


def standard_limit(state: LinearizedState, ntk_cross_test, f0_test) -> np.ndarray:
    """``f_0(x) - Theta(x, X) Theta^-1 (f_0(X) - y)``, the infinite-time limit."""
    return np.asarray(f0_test, dtype=float) - np.asarray(ntk_cross_test) @ state.solve(state.residual0)


def ensemble_mean_inf(gram, ark, sched: RateSchedule, t: float, ntk_cross_test, y,
                      quad_steps: int = 64) -> np.ndarray:
    """Mean output of the infinite-width network over initialisations.

    ``gram`` is the scalar ``(M, M)`` NTK Gram (or a :class:`KernelGram`),
    ``ark`` the scalar ARK diagonal, ``ntk_cross_test`` the ``(N, M)`` scalar
    cross kernel and ``y`` the ``(M, c)`` targets.  Since every kernel is a
    scalar times ``I_c``, the ``Mc x Mc`` exponential splits into one
    ``M x M`` exponential shared by all outputs.  Returns ``(N, c)``.
    """
    k = gram.scalars if isinstance(gram, KernelGram) else np.asarray(gram, dtype=float)
    ark = np.asarray(ark, dtype=float)
    y = np.asarray(y, dtype=float)
    y = y.reshape(k.shape[0], -1)
    xi = _rate_integrals(ark[:, None], sched, t, quad_steps)[:, 0]
    expo = expm(-k * xi[None, :])
    coef = scipy.linalg.solve(k, y - expo @ y, assume_a="pos")
    return np.atleast_2d(ntk_cross_test) @ coef


def _rk4_linear_propagator(h_mat, horizon, steps):
    """Matrix of ``steps`` classical RK4 steps for ``dg/ds = H g`` over ``horizon``."""
    n = h_mat.shape[0]
    z = (horizon / steps) * h_mat
    z2 = z @ z
    one = np.eye(n) + z + z2 / 2.0 + z2 @ z / 6.0 + z2 @ z2 / 24.0
    return np.linalg.matrix_power(one, steps)


def ode_oracle_linearized(state: LinearizedState, sched: RateSchedule, T: float, dt: float,
                          inner_steps: int, ntk_cross_test, f0_test, return_train: bool = False):
    """Integrate the linearised AT flows with nested RK4.

    Outer: ``d f(X)/dt = -Theta(X, X) (g_S - y)`` and
    ``d f(x)/dt = -Theta(x, X) (g_S - y)``; inner (at every outer stage):
    ``d g/ds = Theta_x(X, X) eta(t) (g - y)`` from ``g_0 = f(X)`` over
    ``[0, S]``.  The inner flow is linear with coefficients frozen during a
    stage, so its ``inner_steps`` RK4 steps are applied as one propagator
    matrix.
    """
    if dt <= 0 or T < 0:
        raise ValueError("need dt > 0 and T >= 0")
    if inner_steps < 1:
        raise ValueError("inner_steps must be >= 1")
    n_train = state.m * state.c
    cross = np.atleast_2d(np.asarray(ntk_cross_test, dtype=float))
    ark = state.ark_dense()
    c = state.c
    S = sched.horizon
    y = state.y
    cache = {}

    def propagator(t):
        eta = sched.values(t)
        key = eta.tobytes()
        if key not in cache:
            if S == 0 or not np.any(eta):
                cache[key] = None
            else:
                cache[key] = _rk4_linear_propagator(ark * np.repeat(eta, c)[None, :], S, inner_steps)
        return cache[key]

    def rhs(t, z):
        resid = z[:n_train] - y
        prop = propagator(t)
        if prop is not None:
            resid = prop @ resid
        return np.concatenate([-state.gram @ resid, -cross @ resid])

    z = np.concatenate([state.f0_train, np.asarray(f0_test, dtype=float).ravel()])
    n_steps = int(round(T / dt))
    h = T / n_steps if n_steps else 0.0
    for k in range(n_steps):
        t = k * h
        k1 = rhs(t, z)
        k2 = rhs(t + h / 2, z + h / 2 * k1)
        k3 = rhs(t + h / 2, z + h / 2 * k2)
        k4 = rhs(t + h, z + h * k3)
        z = z + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(z)) or np.max(np.abs(z)) > 1e6:
            raise FloatingPointError(f"ODE oracle diverged at t={t:.4g}")
    if return_train:
        return z[n_train:], z[:n_train]
    return z[n_train:]


# ---------------------------------------------------------------------------
# Degeneration analysis
# ---------------------------------------------------------------------------

@dataclass
class Decomposition:
    """Pieces of ``Xi(t) = a(t) Q A(t) Q^T`` and the two exponential paths."""

    Q: np.ndarray
    D: np.ndarray
    a_t: float
    A_t: np.ndarray          # diagonal of A(t)
    exp_term: np.ndarray     # through the similarity transform
    exp_direct: np.ndarray   # expm(-Theta Xi) directly
    identity_gap: float
    fallback: bool = False   # ARK not positive definite: only the direct path


class IdentityMismatch(AssertionError):
    pass


def _ark_factor(state):
    lam, u = _ark_eig(state)
    q = scipy.linalg.block_diag(*u)
    d = lam.ravel()
    pd = bool(d.min() > 1e-12 * max(d.max(), 0.0)) and d.max() > 0
    return q, d, lam, pd


def degeneration_decompose(state: LinearizedState, sched: RateSchedule, t: float,
                           quad_steps: int = 64, check: bool = True, tol: float = 1e-8,
                           ) -> Decomposition:
    """Split ``exp(-Theta Xi(t))`` into scale ``a(t)`` and bounded ``A(t)``.

    ``exp_term = Q A^-1/2 exp(-a A^1/2 Q^T Theta Q A^1/2) A^1/2 Q^T``; the
    inner exponent is symmetric and is taken through its eigendecomposition,
    independently of the Pade path used for ``exp_direct``.  With ``check``
    the two must agree to ``tol`` (max-abs).
    """
    q, d, lam, pd = _ark_factor(state)
    n = len(d)
    ints = _rate_integrals(lam, sched, t, quad_steps).ravel()
    xi = (q * ints) @ q.T
    direct = expm(-state.gram @ xi) if t > 0 else np.eye(n)
    if t == 0:
        return Decomposition(q, d, 0.0, np.zeros(n), np.eye(n), np.eye(n), 0.0, not pd)
    a = float(ints.max())
    A = ints / a
    if not pd:
        return Decomposition(q, d, a, A, direct, direct, 0.0, True)
    sa = np.sqrt(A)
    h = sa[:, None] * (q.T @ state.gram @ q) * sa[None, :]
    inner = sym_expm(h, -a)
    term = (q / sa[None, :]) @ inner @ (sa[:, None] * q.T)
    gap = float(np.max(np.abs(term - direct)))
    if check and gap > tol:
        raise IdentityMismatch(f"decomposed and direct exponentials differ by {gap:.3e}")
    return Decomposition(q, d, a, A, term, direct, gap)


def geometric_t_grid(state: LinearizedState, sched: RateSchedule, a_min: float = 1e-2,
                     a_max: float = 1e3, n: int = 26) -> np.ndarray:
    """``0`` followed by a geometric grid in units of the initial growth rate of ``a(t)``.

    The unit is ``1 / max_k exp(D_k eta_i(0) S)`` so that ``a(t) ~ t / unit``
    for constant rates.
    """
    lam, _ = _ark_eig(state)
    rates = np.exp(lam * sched.values(0.0)[:, None] * sched.horizon)
    unit = 1.0 / float(rates.max())
    return np.concatenate([[0.0], unit * np.geomspace(a_min, a_max, n)])


@dataclass
class DegenerationReport:
    times: np.ndarray
    exp_norms: np.ndarray
    dist_to_standard_limit: np.ndarray
    a_values: np.ndarray
    lambda_min_h: float
    lambda_max_h: float
    regime: str                     # "degenerate" | "non-degenerate" | "undetermined"
    limit_gap: float                # max |f_AT(t_max) - f_standard_limit|
    max_identity_gap: float
    ark_positive_definite: bool
    notes: list

    def rows(self):
        return [{"t": float(t), "exp_term_norm": float(n), "dist_to_standard_limit": float(g)}
                for t, n, g in zip(self.times, self.exp_norms, self.dist_to_standard_limit)]

    def summary(self) -> dict:
        return {
            "regime": self.regime,
            "lambda_min_H": self.lambda_min_h,
            "lambda_max_H": self.lambda_max_h,
            "final_exp_term_norm": float(self.exp_norms[-1]),
            "limit_gap": self.limit_gap,
            "max_identity_gap": self.max_identity_gap,
            "a_strictly_increasing": bool(np.all(np.diff(self.a_values) > 0)),
            "exp_norm_nonincreasing": bool(np.all(np.diff(self.exp_norms) <= 1e-12)),
            "ark_positive_definite": self.ark_positive_definite,
            "t_max": float(self.times[-1]),
            "notes": list(self.notes),
        }


def degeneration_limit_check(state: LinearizedState, sched: RateSchedule, t_grid,
                             ntk_cross_test, f0_test, quad_steps: int = 64,
                             regime_tol: float = 1e-10) -> DegenerationReport:
    """Track ``||exp(-Theta Xi(t))||_2`` along ``t_grid`` and classify the regime.

    ``H = A^1/2 Q^T Theta Q A^1/2`` is evaluated at the last grid time as the
    proxy for ``t = infinity``.  ``lambda_min(H) > regime_tol * lambda_max(H)``
    means the exponential vanishes in the limit (AT degeneration); otherwise
    it keeps a non-zero limit.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing")
    limit = standard_limit(state, ntk_cross_test, f0_test)
    notes = [f"A(infinity) approximated by A(t_max) at t_max={t_grid[-1]:.6g}"]
    norms, dists, avals = [], [], []
    max_gap = 0.0
    q, d, lam, pd = _ark_factor(state)
    if not pd:
        notes.append("ARK block diagonal is not positive definite; direct expm only")
    for t in t_grid:
        dec = degeneration_decompose(state, sched, t, quad_steps, check=False)
        norms.append(np.linalg.norm(dec.exp_direct, 2))
        avals.append(dec.a_t)
        if not dec.fallback:
            max_gap = max(max_gap, dec.identity_gap)
        xi = xi_matrix(state, sched, t, quad_steps)
        out = at_closed_form(state, xi, ntk_cross_test, f0_test)
        dists.append(float(np.max(np.abs(out - limit))))
    if pd and dec.a_t > 0:
        sa = np.sqrt(dec.A_t)
        h = sa[:, None] * (q.T @ state.gram @ q) * sa[None, :]
        ev = np.linalg.eigvalsh(0.5 * (h + h.T))
        lmin, lmax = float(ev[0]), float(ev[-1])
        regime = "degenerate" if lmin > regime_tol * lmax else "non-degenerate"
    else:
        lmin = lmax = float("nan")
        regime = "undetermined"
    return DegenerationReport(t_grid, np.array(norms), np.array(dists), np.array(avals),
                              lmin, lmax, regime, dists[-1], max_gap, pd, notes)
