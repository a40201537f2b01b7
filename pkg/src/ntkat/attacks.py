"""l-infinity projected gradient descent."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["PgdConfig", "pgd_linf", "project_linf"]


@dataclass(frozen=True)
class PgdConfig:
    """PGD settings; ``alpha`` defaults to ``2 * rho / steps``."""

    rho: float
    steps: int = 10
    alpha: Optional[float] = None
    clamp_box: Optional[tuple] = None
    random_start: bool = False

    def __post_init__(self):
        if not self.rho >= 0:
            raise ValueError(f"rho must be >= 0, got {self.rho}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.alpha is None:
            object.__setattr__(self, "alpha", 2.0 * self.rho / self.steps)
        if self.rho > 0 and not self.alpha > 0:
            raise ValueError("alpha must be > 0 when rho > 0")
        if self.clamp_box is not None:
            lo, hi = self.clamp_box
            if lo > hi:
                raise ValueError("clamp_box lower bound exceeds upper bound")
            object.__setattr__(self, "clamp_box", (float(lo), float(hi)))


def project_linf(x_adv, x, rho, clamp_box=None):
    """Project onto the l-inf ball around ``x`` (then the box, if given).

    The result satisfies ``abs(out - x) <= rho`` when evaluated in floating
    point, which the plain clip does not guarantee: ``fl(x + rho) - x`` can
    round above ``rho``.  Offending coordinates are stepped one ulp towards
    ``x`` until the bound holds.
    """
    out = np.clip(x_adv, x - rho, x + rho)
    if clamp_box is not None:
        out = np.clip(out, clamp_box[0], clamp_box[1])
    for _ in range(4):
        diff = out - x
        hi = diff > rho
        lo = -diff > rho
        if not (hi.any() or lo.any()):
            break
        out = np.where(hi, np.nextafter(out, -np.inf), out)
        out = np.where(lo, np.nextafter(out, np.inf), out)
    return out


def pgd_linf(x, y, grad_fn: Callable, cfg: PgdConfig, rng: np.random.Generator | None = None):
    """Signed-gradient ascent on the loss, projected onto the l-inf ball.

    Parameters
    ----------
    x, y : ndarray
        Clean inputs and targets; a single example or a batch (leading axis).
    grad_fn : callable
        ``grad_fn(x, y)`` returns the loss gradient w.r.t. ``x`` with the
        same shape as ``x``.
    cfg : PgdConfig
    rng : Generator, optional
        Only used when ``cfg.random_start`` is set.

    Returns
    -------
    ndarray
        ``x^(K)``, inside the ball (and the clamp box) coordinatewise.
    """
    x = np.asarray(x, dtype=float)
    if cfg.rho == 0:
        return x.copy()
    x_adv = x.copy()
    if cfg.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        x_adv = project_linf(x + rng.uniform(-cfg.rho, cfg.rho, size=x.shape), x, cfg.rho,
                             cfg.clamp_box)
    for _ in range(cfg.steps):
        g = np.asarray(grad_fn(x_adv, y), dtype=float)
        x_adv = project_linf(x_adv + cfg.alpha * np.sign(g), x, cfg.rho, cfg.clamp_box)
    return x_adv
