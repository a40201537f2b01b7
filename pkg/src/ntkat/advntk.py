"""Adv-NTK: an infinite-width network whose diagonal regularisation
parameters are trained against adversarial validation examples.

The model is

    f(x) = Theta(x, X) Theta(X, X)^-1 (I - exp(-Theta(X, X) Diag(w))) y

over an optimisation set ``X``.  Because ``Theta(X, X) = K (x) I_c`` and
``w`` is a per-(sample, output) diagonal, the ``Mc x Mc`` exponential is a
direct sum of ``c`` exponentials of ``-K Diag(w_a)``, one per output
coordinate ``a``.  Two interchangeable back ends evaluate them:

``"pade"``
    ``expm`` of the non-symmetric ``-K Diag(w_a)``; gradients through one
    Frechet-adjoint call per output.
``"eigh"``
    the similarity ``exp(-K W) = K^1/2 exp(-K^1/2 W K^1/2) K^-1/2`` and the
    Daleckii-Krein formula for the derivative.  Same values, ``O(M^3)`` with
    a small constant; used for the larger experiments.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .attacks import PgdConfig, pgd_linf
from .dynamics import SingularGramError
from .finite_net import make_rng
from .kernels import NetSpec, contract_partials, ntk_cross, ntk_cross_partials, ntk_gram
from .matfun import exp_divided_differences, expm, expm_frechet_adjoint

log = logging.getLogger(__name__)

__all__ = [
    "AdvNtkModel",
    "NtkRegressor",
    "SplitPlan",
    "make_split",
    "advntk_eval",
    "advntk_grad_varpi",
    "advntk_grad_x",
    "advntk_train",
    "save_model",
    "load_model",
    "ModelIntegrityError",
]

METHODS = ("eigh", "pade")


class ModelIntegrityError(ValueError):
    pass


def _gram_checksum(k: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(k, dtype="<f8").tobytes()).hexdigest()


def _check_pd(k, ratio=1e-10):
    lam, vec = np.linalg.eigh(k)
    if lam[0] <= ratio * lam[-1]:
        raise SingularGramError(f"NTK Gram is singular: eigenvalues in [{lam[0]:.3e}, {lam[-1]:.3e}]")
    return lam, vec


class _KernelPredictor:
    """Shared ``f(x) = Theta(x, X) beta`` evaluation and input gradients."""

    spec: NetSpec
    xs_opt: np.ndarray

    def coefficients(self) -> np.ndarray:
        raise NotImplementedError

    def predict(self, xs) -> np.ndarray:
        return ntk_cross(self.spec, np.atleast_2d(xs), self.xs_opt) @ self.coefficients()

    def loss_grad_x(self, xs, ys) -> np.ndarray:
        """Gradient of ``0.5 ||f(x) - y||^2`` w.r.t. each row of ``xs``."""
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ys = np.asarray(ys, dtype=float).reshape(xs.shape[0], -1)
        beta = self.coefficients()
        theta, dp, dq = ntk_cross_partials(self.spec, xs, self.xs_opt)
        resid = theta @ beta - ys
        return contract_partials(xs, self.xs_opt, dp, dq, resid @ beta.T)

    def jacobian_x(self, x) -> np.ndarray:
        """``df/dx`` at a single point, ``(c, d)``."""
        x = np.asarray(x, dtype=float)[None, :]
        beta = self.coefficients()
        _, dp, dq = ntk_cross_partials(self.spec, x, self.xs_opt)
        return np.stack([contract_partials(x, self.xs_opt, dp, dq, beta[:, a][None, :])[0]
                         for a in range(beta.shape[1])])


class NtkRegressor(_KernelPredictor):
    """Infinite-time NTK regression ``Theta(x, X) Theta^-1 y`` (the ``w -> inf`` limit)."""

    def __init__(self, spec: NetSpec, xs, ys):
        self.spec = spec
        self.xs_opt = np.asarray(xs, dtype=float)
        ys = np.asarray(ys, dtype=float).reshape(self.xs_opt.shape[0], -1)
        k = ntk_gram(spec, self.xs_opt).scalars
        _check_pd(k)
        self._beta = scipy.linalg.solve(k, ys, assume_a="pos")

    def coefficients(self):
        return self._beta


class AdvNtkModel(_KernelPredictor):
    """Adv-NTK predictor with trainable ``varpi`` (length ``M_opt * c``, sample-major)."""

    def __init__(self, spec: NetSpec, xs_opt, ys_opt, varpi=None, method: str = "eigh"):
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        self.spec = spec
        self.method = method
        self.xs_opt = np.asarray(xs_opt, dtype=float)
        m = self.xs_opt.shape[0]
        self.ys_opt = np.asarray(ys_opt, dtype=float).reshape(m, -1)
        self.c = self.ys_opt.shape[1]
        if self.c != spec.output_dim:
            raise ValueError(f"targets have {self.c} outputs, spec says {spec.output_dim}")
        self.gram = ntk_gram(spec, self.xs_opt).scalars
        lam, vec = _check_pd(self.gram)
        self._sqrt = (vec * np.sqrt(lam)) @ vec.T
        self._isqrt = (vec / np.sqrt(lam)) @ vec.T
        self._chol = scipy.linalg.cho_factor(self.gram)
        self._z = self._isqrt @ self.ys_opt           # K^-1/2 y, per output column
        self._cache_key = None
        self._cache = None
        self.varpi = np.zeros(m * self.c) if varpi is None else varpi

    @property
    def m(self) -> int:
        return self.xs_opt.shape[0]

    @property
    def varpi(self) -> np.ndarray:
        return self._varpi

    @varpi.setter
    def varpi(self, value):
        value = np.array(value, dtype=float).ravel()
        if value.shape != (self.m * self.c,):
            raise ValueError(f"varpi must have length {self.m * self.c}")
        if not np.all(np.isfinite(value)):
            raise ValueError("non-finite varpi")
        self._varpi = value

    def gram_checksum(self) -> str:
        return _gram_checksum(self.gram)

    def _w(self) -> np.ndarray:
        """``varpi`` as ``(M, c)``: column ``a`` is the diagonal for output ``a``."""
        return self._varpi.reshape(self.m, self.c)

    def _factors(self):
        """Per-output factorisations for the current ``varpi`` (cached)."""
        key = self._varpi.tobytes()
        if key == self._cache_key:
            return self._cache
        w = self._w()
        beta = np.empty((self.m, self.c))
        per_output = []
        for a in range(self.c):
            if self.method == "pade":
                amat = -self.gram * w[None, :, a]
                e = expm(amat)
                y = self.ys_opt[:, a]
                beta[:, a] = scipy.linalg.cho_solve(self._chol, y - e @ y)
                per_output.append(amat)
            else:
                b = self._sqrt @ (w[:, a, None] * self._sqrt)
                om, u = np.linalg.eigh(0.5 * (b + b.T))
                z = self._z[:, a]
                fz = u @ (np.exp(-om) * (u.T @ z))
                beta[:, a] = self._isqrt @ (z - fz)
                per_output.append((om, u))
        self._cache_key, self._cache = key, (beta, per_output)
        return self._cache

    def coefficients(self) -> np.ndarray:
        return self._factors()[0]

    def grad_varpi(self, batch_x, batch_y) -> np.ndarray:
        """Gradient of ``0.5 sum_b ||f(x_b) - y_b||^2`` w.r.t. ``varpi``."""
        batch_x = np.atleast_2d(np.asarray(batch_x, dtype=float))
        if batch_x.shape[0] == 0:
            raise ValueError("empty batch")
        batch_y = np.asarray(batch_y, dtype=float).reshape(batch_x.shape[0], -1)
        beta, per_output = self._factors()
        kx = ntk_cross(self.spec, batch_x, self.xs_opt)
        resid = kx @ beta - batch_y
        u_all = kx.T @ resid                         # d loss / d beta, (M, c)
        g = np.empty((self.m, self.c))
        for a in range(self.c):
            u = u_all[:, a]
            if self.method == "pade":
                kinv_u = scipy.linalg.cho_solve(self._chol, u)
                cot = -np.outer(kinv_u, self.ys_opt[:, a])
                adj = expm_frechet_adjoint(per_output[a], cot)
                g[:, a] = -np.einsum("ij,ij->j", self.gram, adj)
            else:
                om, uu = per_output[a]
                v = self._isqrt @ u
                z = self._z[:, a]
                gamma = exp_divided_differences(-om)
                inner = gamma * np.outer(uu.T @ v, uu.T @ z)
                n = uu @ inner @ uu.T
                g[:, a] = np.einsum("ji,ij->j", self._sqrt, n @ self._sqrt)
        return g.ravel()

    def to_record(self) -> dict:
        return {
            "format": "ntkat.advntk/1",
            "spec": self.spec.to_dict(),
            "method": self.method,
            "xs_opt": self.xs_opt.tolist(),
            "ys_opt": self.ys_opt.tolist(),
            "varpi": self._varpi.tolist(),
            "gram_sha256": self.gram_checksum(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AdvNtkModel":
        model = cls(NetSpec.from_dict(rec["spec"]), rec["xs_opt"], rec["ys_opt"],
                    rec["varpi"], rec.get("method", "eigh"))
        if model.gram_checksum() != rec["gram_sha256"]:
            raise ModelIntegrityError("Gram checksum mismatch: record is corrupt or kernel changed")
        return model


def advntk_eval(model: AdvNtkModel, x) -> np.ndarray:
    """``f_w(x)`` for one input (``(c,)``) or a batch (``(N, c)``)."""
    x = np.asarray(x, dtype=float)
    out = model.predict(x)
    return out[0] if x.ndim == 1 else out


def advntk_grad_varpi(model: AdvNtkModel, batch_x, batch_y) -> np.ndarray:
    return model.grad_varpi(batch_x, batch_y)


def advntk_grad_x(model: AdvNtkModel, x, y) -> np.ndarray:
    """Gradient of ``0.5 ||f(x) - y||^2`` w.r.t. ``x`` (single point or batch)."""
    x = np.asarray(x, dtype=float)
    g = model.loss_grad_x(x, y)
    return g[0] if x.ndim == 1 else g


@dataclass(frozen=True)
class SplitPlan:
    m_val: int
    seed: int
    indices_opt: np.ndarray
    indices_val: np.ndarray

    def __post_init__(self):
        opt = np.asarray(self.indices_opt)
        val = np.asarray(self.indices_val)
        if len(val) != self.m_val:
            raise ValueError("validation index count does not match m_val")
        if np.intersect1d(opt, val).size:
            raise ValueError("opt and val indices overlap")


def make_split(m: int, m_val: int, seed: int) -> SplitPlan:
    """Seeded uniform split of ``range(m)`` into optimisation and validation parts."""
    if not 0 < m_val < m:
        raise ValueError("need 0 < m_val < m")
    perm = make_rng(seed).permutation(m)
    return SplitPlan(m_val, seed, np.sort(perm[m_val:]), np.sort(perm[:m_val]))


def advntk_train(xs, ys, spec: NetSpec, plan: SplitPlan, pgd: PgdConfig, iters: int, lr: float,
                 batch: int, seed: int = 0, method: str = "eigh",
                 callback: Callable[[dict], None] | None = None):
    """Train ``varpi`` with minibatch SGD and l2 gradient normalisation.

    Each iteration draws a validation minibatch, attacks the current model
    with PGD (the model is held fixed during the attack), and steps
    ``varpi <- varpi - lr * g / ||g||``.  A zero gradient skips the step.
    Returns ``(model, rows)``.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float).reshape(xs.shape[0], -1)
    model = AdvNtkModel(spec, xs[plan.indices_opt], ys[plan.indices_opt], method=method)
    xv, yv = xs[plan.indices_val], ys[plan.indices_val]
    rng = make_rng(seed)
    nb = min(batch, len(xv))
    rows = []
    for it in range(1, iters + 1):
        idx = rng.choice(len(xv), size=nb, replace=False)
        xb, yb = xv[idx], yv[idx]
        x_adv = pgd_linf(xb, yb, model.loss_grad_x, pgd)
        resid = model.predict(x_adv) - yb
        loss = 0.5 * float(np.sum(resid ** 2)) / nb
        g = model.grad_varpi(x_adv, yb)
        gnorm = float(np.linalg.norm(g))
        stepped = gnorm > 0
        if stepped:
            model.varpi = model.varpi - lr * g / gnorm
        row = {"iteration": it, "robust_val_loss": loss, "grad_norm": gnorm,
               "step_taken": int(stepped)}
        rows.append(row)
        log.info("iter %d robust val loss %.5f |g| %.3e", it, loss, gnorm)
        if callback is not None:
            callback(row)
    return model, rows


def save_model(model: AdvNtkModel, path) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(model.to_record(), fh)
    os.replace(tmp, path)


def load_model(path) -> AdvNtkModel:
    with open(path) as fh:
        return AdvNtkModel.from_record(json.load(fh))
