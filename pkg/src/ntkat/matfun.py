"""Matrix exponential and its Frechet-derivative adjoint."""
from __future__ import annotations

import numpy as np
import scipy.linalg

__all__ = ["expm", "expm_frechet_adjoint", "sym_expm", "exp_divided_differences",
           "MatrixSizeError", "EXPM_CAP"]

EXPM_CAP = 4096


class MatrixSizeError(ValueError):
    pass


def _check(a, cap):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {a.shape}")
    if a.shape[0] > cap:
        raise MatrixSizeError(f"matrix of order {a.shape[0]} exceeds cap {cap}")
    if not np.all(np.isfinite(a)):
        raise ValueError("matrix has non-finite entries")
    return a


def expm(a, cap: int = EXPM_CAP) -> np.ndarray:
    """Scaling-and-squaring exponential with a degree-13 Pade approximant."""
    a = _check(a, cap)
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = scipy.linalg.expm(a)
        except FloatingPointError as exc:
            raise OverflowError("matrix exponential overflowed") from exc
    if not np.all(np.isfinite(out)):
        raise OverflowError("matrix exponential overflowed")
    return out


def expm_frechet_adjoint(a, g, cap: int = EXPM_CAP) -> np.ndarray:
    """Adjoint of ``E -> L(a, E)`` applied to ``g``.

    For real matrices ``L*(A, G) = L(A^T, G)``, and ``L(X, G)`` is the upper
    right block of ``expm([[X, G], [0, X]])``.
    """
    a = _check(a, cap)
    g = np.asarray(g, dtype=float)
    if g.shape != a.shape:
        raise ValueError("g must match a in shape")
    n = a.shape[0]
    if 2 * n > cap:
        raise MatrixSizeError(f"augmented order {2 * n} exceeds cap {cap}")
    big = np.zeros((2 * n, 2 * n))
    big[:n, :n] = a.T
    big[n:, n:] = a.T
    big[:n, n:] = g
    return expm(big, cap)[:n, n:]


def sym_expm(s, scale: float = 1.0) -> np.ndarray:
    """``exp(scale * s)`` for symmetric ``s`` through its eigendecomposition."""
    lam, u = np.linalg.eigh(0.5 * (s + s.T))
    return (u * np.exp(scale * lam)) @ u.T


def exp_divided_differences(lam: np.ndarray) -> np.ndarray:
    """``(exp(l_i) - exp(l_j)) / (l_i - l_j)`` with the diagonal limit ``exp(l_i)``."""
    li = lam[:, None]
    lj = lam[None, :]
    hi = np.maximum(li, lj)
    gap = np.abs(li - lj)
    small = gap < 1e-10
    safe = np.where(small, 1.0, gap)
    ratio = np.where(small, 1.0 - 0.5 * gap, -np.expm1(-safe) / safe)
    return np.exp(hi) * ratio
