"""Infinite-width NNGP, NTK and ARK recursions for fully-connected networks.

The network convention is the NTK-normalised one used throughout the
package::

    h1 = W1 @ x / sqrt(d) + b1,     h_{l+1} = W_{l+1} @ phi(h_l) / sqrt(n_l) + b_{l+1}

with ``W ~ N(0, sigma_w**2)`` and ``b ~ N(0, sigma_b**2)``.  Under this
convention the limiting kernels are

* NNGP:  ``Sigma1 = sigma_w**2 x.x'/d + sigma_b**2``,
  ``Sigma_{l+1} = sigma_w**2 E[phi phi] + sigma_b**2``
* NTK:   ``Theta1 = x.x'/d + 1``,
  ``Theta_{l+1} = sigma_w**2 Theta_l E[phi' phi'] + E[phi phi] + 1``
* ARK:   ``Theta_x1 = sigma_w**2``,
  ``Theta_x{l+1} = sigma_w**2 Theta_xl E[phi' phi']``

where the Gaussian expectations are taken under ``Sigma_l``.  Every kernel
depends on the pair ``(x, x')`` only through the three scalars
``p = x.x/d``, ``q = x.x'/d`` and ``r = x'.x'/d``; the vectorised core works
on those and carries forward-mode partials in ``p`` and ``q`` when input
gradients are needed.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

__all__ = [
    "Activation",
    "NetSpec",
    "BivariateMoment",
    "KernelGram",
    "NumericalBreakdown",
    "gauss_ee",
    "gauss_dd",
    "nngp_sigma",
    "ntk_theta",
    "ark_theta_x",
    "ntk_gram",
    "ntk_cross",
    "ark_diag",
    "ntk_grad_x",
    "ntk_grad_x_contract",
    "ntk_cross_partials",
    "contract_partials",
]

CS_TOL = 1e-12


class NumericalBreakdown(ArithmeticError):
    """Raised when intermediate moments stop being a valid covariance."""


class Activation(str, enum.Enum):
    ERF = "erf"
    RELU = "relu"

    @property
    def smooth(self) -> bool:
        # erf is twice differentiable and Lipschitz smooth; relu is neither.
        return self is Activation.ERF


@dataclass(frozen=True)
class NetSpec:
    """Architecture shared by the analytic kernels and the finite networks.

    ``depth`` counts hidden layers, so the network has ``depth + 1`` affine
    maps.  ``hidden_width`` only matters for finite networks.
    """

    depth: int
    input_dim: int
    output_dim: int = 1
    activation: Activation = Activation.ERF
    sigma_w: float = 1.76
    sigma_b: float = 0.18
    hidden_width: int = 512

    def __post_init__(self):
        object.__setattr__(self, "activation", Activation(self.activation))
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        if not self.sigma_w > 0:
            raise ValueError(f"sigma_w must be > 0, got {self.sigma_w}")
        if not self.sigma_b >= 0:
            raise ValueError(f"sigma_b must be >= 0, got {self.sigma_b}")
        if self.hidden_width < 1:
            raise ValueError("hidden_width must be >= 1")

    @property
    def widths(self) -> list[int]:
        return [self.input_dim] + [self.hidden_width] * self.depth + [self.output_dim]

    def with_width(self, width: int) -> "NetSpec":
        return NetSpec(self.depth, self.input_dim, self.output_dim, self.activation,
                       self.sigma_w, self.sigma_b, width)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "input_dim": self.input_dim,
            "output_dim": self.output_dim,
            "activation": self.activation.value,
            "sigma_w": self.sigma_w,
            "sigma_b": self.sigma_b,
            "hidden_width": self.hidden_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetSpec":
        return cls(**d)


@dataclass(frozen=True)
class BivariateMoment:
    """Covariance ``[[s11, s12], [s12, s22]]`` of a centred Gaussian pair."""

    s11: float
    s12: float
    s22: float

    def __post_init__(self):
        vals = (self.s11, self.s12, self.s22)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite moment {vals}")
        if self.s11 < 0 or self.s22 < 0:
            raise ValueError(f"negative variance in {vals}")
        if self.s12 ** 2 > self.s11 * self.s22 + CS_TOL:
            raise NumericalBreakdown(f"Cauchy-Schwarz violated: {vals}")


@dataclass(frozen=True)
class KernelGram:
    """Scalar Gram matrix standing in for ``scalars (x) I_c``."""

    scalars: np.ndarray
    c: int = 1

    @property
    def m(self) -> int:
        return self.scalars.shape[0]

    def materialize(self) -> np.ndarray:
        return np.kron(self.scalars, np.eye(self.c))


# ---------------------------------------------------------------------------
# Gaussian expectations and their partials
# ---------------------------------------------------------------------------

class _Moments(NamedTuple):
    ee: np.ndarray
    dd: np.ndarray
    # partials w.r.t. (s11, s12); None unless requested
    ee_1: np.ndarray | None = None
    ee_2: np.ndarray | None = None
    dd_1: np.ndarray | None = None
    dd_2: np.ndarray | None = None


def _check_cs(s11, s12, s22):
    prod = s11 * s22
    bad = s12 * s12 > prod + CS_TOL
    if np.any(bad):
        raise NumericalBreakdown("Cauchy-Schwarz violated in intermediate moments")
    if np.any((prod == 0) & (s12 != 0)):
        raise NumericalBreakdown("zero variance with non-zero covariance")


def _relu_moments(s11, s12, s22, partials):
    prod = s11 * s22
    root = np.sqrt(prod)
    safe = np.where(root > 0, root, 1.0)
    rho = np.where(root > 0, s12 / safe, 0.0)
    rho = np.clip(rho, -1.0, 1.0)
    theta = np.arccos(rho)
    j = np.sin(theta) + (np.pi - theta) * rho
    ee = root * j / (2 * np.pi)
    dd = (np.pi - theta) / (2 * np.pi)
    if not partials:
        return _Moments(ee, dd)
    # Price's theorem gives d ee / d s12 = E[phi' phi'].
    ee_2 = dd
    s11_safe = np.where(s11 > 0, s11, 1.0)
    ee_1 = np.where(s11 > 0, (ee - s12 * dd) / (2 * s11_safe), 0.0)
    # d theta / d rho = -1/sqrt(1-rho^2); at |rho| = 1 the one-sided limit is
    # infinite and the finite surrogate 0 is used instead.
    sin_t = np.sqrt(np.maximum(1.0 - rho * rho, 0.0))
    edge = sin_t < 1e-12
    g = np.where(edge, 0.0, 1.0 / (2 * np.pi * np.where(edge, 1.0, sin_t)))
    drho_2 = np.where(root > 0, 1.0 / safe, 0.0)
    drho_1 = np.where(s11 > 0, -rho / (2 * s11_safe), 0.0)
    return _Moments(ee, dd, ee_1, ee_2, g * drho_1, g * drho_2)


def _erf_moments(s11, s12, s22, partials):
    a = 1.0 + 2.0 * s11
    b = 1.0 + 2.0 * s22
    ab = a * b
    z = np.clip(2.0 * s12 / np.sqrt(ab), -1.0, 1.0)
    ee = (2.0 / np.pi) * np.arcsin(z)
    det = ab - 4.0 * s12 * s12
    det = np.maximum(det, np.finfo(float).tiny)
    dd = (4.0 / np.pi) / np.sqrt(det)
    if not partials:
        return _Moments(ee, dd)
    ee_2 = dd
    ee_1 = -(2.0 / np.pi) * z / (a * np.sqrt(np.maximum(1.0 - z * z, np.finfo(float).tiny)))
    c = -(2.0 / np.pi) * det ** -1.5
    dd_1 = c * 2.0 * b
    dd_2 = c * (-8.0 * s12)
    return _Moments(ee, dd, ee_1, ee_2, dd_1, dd_2)


def _moments(activation, s11, s12, s22, partials=False) -> _Moments:
    _check_cs(s11, s12, s22)
    if activation is Activation.RELU:
        return _relu_moments(s11, s12, s22, partials)
    return _erf_moments(s11, s12, s22, partials)


def _diag_ee(activation, s):
    """``E[phi(u)^2]`` for ``u ~ N(0, s)`` and its derivative in ``s``."""
    if activation is Activation.RELU:
        return s / 2.0, np.full_like(s, 0.5)
    val = (2.0 / np.pi) * np.arcsin(2.0 * s / (1.0 + 2.0 * s))
    der = (4.0 / np.pi) / ((1.0 + 2.0 * s) * np.sqrt(1.0 + 4.0 * s))
    return val, der


def gauss_ee(activation: Activation, m: BivariateMoment) -> float:
    """``E[phi(u) phi(v)]`` for ``(u, v) ~ N(0, [[s11, s12], [s12, s22]])``."""
    activation = Activation(activation)
    out = _moments(activation, np.float64(m.s11), np.float64(m.s12), np.float64(m.s22))
    return float(out.ee)


def gauss_dd(activation: Activation, m: BivariateMoment) -> float:
    """``E[phi'(u) phi'(v)]`` under the same bivariate Gaussian."""
    activation = Activation(activation)
    out = _moments(activation, np.float64(m.s11), np.float64(m.s12), np.float64(m.s22))
    return float(out.dd)


# ---------------------------------------------------------------------------
# Layer recursion
# ---------------------------------------------------------------------------

class _Pass(NamedTuple):
    theta: np.ndarray
    ark: np.ndarray
    sigmas: list          # Sigma^(l)(x, x') for l = 1..L+1
    dtheta_dp: np.ndarray | None
    dtheta_dq: np.ndarray | None


def _kernel_pass(spec: NetSpec, p, q, r, *, grad=False, n_layers=None) -> _Pass:
    """Run the recursion on broadcastable arrays of ``(p, q, r)``.

    ``p`` and ``r`` are the normalised squared norms of the two arguments and
    ``q`` their normalised inner product.  With ``grad`` the partials of the
    final NTK w.r.t. ``p`` and ``q`` are propagated alongside.
    """
    act = spec.activation
    L = spec.depth if n_layers is None else n_layers
    sw2 = spec.sigma_w ** 2
    sb2 = spec.sigma_b ** 2
    p, q, r = (np.asarray(v, dtype=float) for v in (p, q, r))
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q)) and np.all(np.isfinite(r))):
        raise ValueError("non-finite kernel inputs")

    s11 = sw2 * p + sb2
    s12 = sw2 * q + sb2
    s22 = sw2 * r + sb2
    theta = q + 1.0
    ark = np.full(np.broadcast(p, q, r).shape, sw2)
    sigmas = [s12]
    if grad:
        d11_p = np.full_like(s11, sw2)       # d s11 / dp
        d12_p = np.zeros_like(s12)           # d s12 / dp
        d12_q = np.full_like(s12, sw2)       # d s12 / dq
        th_p = np.zeros_like(theta)
        th_q = np.ones_like(theta)

    for _ in range(L):
        m = _moments(act, s11, s12, s22, partials=grad)
        new_theta = sw2 * theta * m.dd + m.ee + 1.0
        ark = sw2 * ark * m.dd
        e11, de11 = _diag_ee(act, s11)
        e22, _ = _diag_ee(act, s22)
        if grad:
            ee_p = m.ee_1 * d11_p + m.ee_2 * d12_p
            ee_q = m.ee_2 * d12_q
            dd_p = m.dd_1 * d11_p + m.dd_2 * d12_p
            dd_q = m.dd_2 * d12_q
            th_p, th_q = (sw2 * (th_p * m.dd + theta * dd_p) + ee_p,
                          sw2 * (th_q * m.dd + theta * dd_q) + ee_q)
            d12_p, d12_q = sw2 * ee_p, sw2 * ee_q
            d11_p = sw2 * de11 * d11_p
        theta = new_theta
        s12 = sw2 * m.ee + sb2
        s11 = sw2 * e11 + sb2
        s22 = sw2 * e22 + sb2
        sigmas.append(s12)

    return _Pass(theta, ark, sigmas, th_p if grad else None, th_q if grad else None)


def _as_vec(x, d=None):
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a vector, got shape {x.shape}")
    if d is not None and x.shape[0] != d:
        raise ValueError(f"expected length {d}, got {x.shape[0]}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite input vector")
    return x


def _pqr(spec, x, x2):
    d = spec.input_dim
    x = _as_vec(x, d)
    x2 = _as_vec(x2, d)
    return x @ x / d, x @ x2 / d, x2 @ x2 / d


def nngp_sigma(spec: NetSpec, layer: int, x, x2) -> float:
    """NNGP covariance ``Sigma^(layer)(x, x2)`` for ``1 <= layer <= L+1``."""
    if not 1 <= layer <= spec.depth + 1:
        raise ValueError(f"layer must be in [1, {spec.depth + 1}], got {layer}")
    p, q, r = _pqr(spec, x, x2)
    out = _kernel_pass(spec, p, q, r, n_layers=layer - 1)
    return float(out.sigmas[-1])


def ntk_theta(spec: NetSpec, x, x2) -> float:
    """Scalar infinite-width NTK of the output layer."""
    p, q, r = _pqr(spec, x, x2)
    return float(_kernel_pass(spec, p, q, r).theta)


def ark_theta_x(spec: NetSpec, x, x2) -> float:
    """Scalar infinite-width adversarial regularisation kernel (ARK)."""
    p, q, r = _pqr(spec, x, x2)
    return float(_kernel_pass(spec, p, q, r).ark)


def _as_mat(xs, d):
    xs = np.asarray(xs, dtype=float)
    if xs.ndim == 1:
        xs = xs[None, :]
    if xs.ndim != 2 or xs.shape[1] != d:
        raise ValueError(f"expected shape (M, {d}), got {xs.shape}")
    if xs.shape[0] < 1:
        raise ValueError("need at least one point")
    if not np.all(np.isfinite(xs)):
        raise ValueError("non-finite inputs")
    return xs


def ntk_cross(spec: NetSpec, xa, xb) -> np.ndarray:
    """Scalar NTK between every row of ``xa`` and every row of ``xb``."""
    d = spec.input_dim
    xa = _as_mat(xa, d)
    xb = _as_mat(xb, d)
    pa = np.einsum("ij,ij->i", xa, xa) / d
    pb = np.einsum("ij,ij->i", xb, xb) / d
    q = xa @ xb.T / d
    return _kernel_pass(spec, pa[:, None], q, pb[None, :]).theta


def ntk_gram(spec: NetSpec, xs) -> KernelGram:
    """Gram matrix of the scalar NTK over ``xs``; the full matrix is ``scalars (x) I_c``."""
    xs = _as_mat(xs, spec.input_dim)
    k = ntk_cross(spec, xs, xs)
    k = 0.5 * (k + k.T)
    return KernelGram(k, spec.output_dim)


def ark_diag(spec: NetSpec, xs) -> np.ndarray:
    """``Theta_x(x_i, x_i)`` for each row."""
    d = spec.input_dim
    xs = _as_mat(xs, d)
    p = np.einsum("ij,ij->i", xs, xs) / d
    return _kernel_pass(spec, p, p, p).ark


def ntk_grad_x(spec: NetSpec, x, x2) -> np.ndarray:
    """Gradient of ``Theta(x, x2)`` with respect to its first argument."""
    p, q, r = _pqr(spec, x, x2)
    out = _kernel_pass(spec, p, q, r, grad=True)
    x = np.asarray(x, dtype=float)
    x2 = np.asarray(x2, dtype=float)
    return (2.0 * out.dtheta_dp * x + out.dtheta_dq * x2) / spec.input_dim


def ntk_cross_partials(spec: NetSpec, xs, anchors):
    """Cross NTK with its partials in ``p = x.x/d`` and ``q = x.a/d``.

    Returns ``(theta, dtheta_dp, dtheta_dq)``, each of shape ``(B, N)``.
    """
    d = spec.input_dim
    xs = _as_mat(xs, d)
    anchors = _as_mat(anchors, d)
    pa = np.einsum("ij,ij->i", xs, xs) / d
    pb = np.einsum("ij,ij->i", anchors, anchors) / d
    q = xs @ anchors.T / d
    out = _kernel_pass(spec, pa[:, None], q, pb[None, :], grad=True)
    return out.theta, out.dtheta_dp, out.dtheta_dq


def contract_partials(xs, anchors, dtheta_dp, dtheta_dq, coef):
    """``sum_j coef[b, j] dTheta(xs[b], anchors[j]) / dxs[b]`` from precomputed partials."""
    xs = np.asarray(xs, dtype=float)
    d = xs.shape[1]
    w_p = np.sum(coef * dtheta_dp, axis=1)
    return (2.0 * w_p[:, None] * xs + (coef * dtheta_dq) @ np.asarray(anchors, dtype=float)) / d


def ntk_grad_x_contract(spec: NetSpec, xs, anchors, coef):
    """Batched ``sum_j coef[b, j] * dTheta(xs[b], anchors[j]) / dxs[b]``.

    Returns ``(theta, grads)`` where ``theta`` is the ``(B, N)`` cross kernel
    and ``grads`` the ``(B, d)`` contracted gradients.
    """
    theta, dp, dq = ntk_cross_partials(spec, xs, anchors)
    xs = _as_mat(xs, spec.input_dim)
    return theta, contract_partials(xs, anchors, dp, dq, np.asarray(coef, dtype=float))
