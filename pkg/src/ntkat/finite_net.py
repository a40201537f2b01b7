"""Finite-width MLPs with hand-written reverse mode, empirical kernels and
adversarial-training simulators.

Parameters are immutable tuples of arrays; every update builds a new
:class:`MlpParams`.  Initialisation draws from a Philox counter-based
generator so a given ``(spec, seed)`` reproduces the same network on every
platform numpy supports.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy.special import erf

from .attacks import PgdConfig, pgd_linf
from .kernels import Activation, NetSpec

log = logging.getLogger(__name__)

__all__ = [
    "MlpParams",
    "ForwardTrace",
    "DivergenceError",
    "make_rng",
    "mlp_init",
    "mlp_forward",
    "forward",
    "backward",
    "param_jacobian",
    "input_jacobian",
    "empirical_ntk",
    "empirical_ntk_cross",
    "empirical_ark_diag",
    "Trajectory",
    "gradflow_at_simulate",
    "SgdConfig",
    "sgd_at_train",
    "MlpModel",
]

DIVERGENCE_LIMIT = 1e6
_SQRT_PI = np.sqrt(np.pi)


class DivergenceError(FloatingPointError):
    pass


def make_rng(seed: int) -> np.random.Generator:
    """Seeded Philox (counter-based) generator used for all randomness."""
    return np.random.Generator(np.random.Philox(int(seed)))


def _phi(act, h):
    if act is Activation.RELU:
        return np.maximum(h, 0.0)
    return erf(h)


def _dphi(act, h):
    if act is Activation.RELU:
        return (h > 0).astype(h.dtype)
    return (2.0 / _SQRT_PI) * np.exp(-h * h)


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class MlpParams:
    spec: NetSpec
    weights: tuple
    biases: tuple

    def __post_init__(self):
        widths = self.spec.widths
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("need depth + 1 weight matrices and bias vectors")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l + 1], widths[l]) or b.shape != (widths[l + 1],):
                raise ValueError(f"layer {l + 1}: bad shapes {w.shape}, {b.shape}")
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        """Parameters flattened as ``[W1, b1, W2, b2, ...]`` (row-major)."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts += [w.ravel(), b]
        return np.concatenate(parts)

    def unflat(self, theta: np.ndarray) -> "MlpParams":
        ws, bs, k = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(theta[k:k + w.size].reshape(w.shape))
            k += w.size
            bs.append(theta[k:k + b.size])
            k += b.size
        return MlpParams(self.spec, tuple(ws), tuple(bs))

    def axpy(self, alpha: float, grads: "Grads") -> "MlpParams":
        """Return ``self + alpha * grads``."""
        ws = tuple(w + alpha * g for w, g in zip(self.weights, grads.weights))
        bs = tuple(b + alpha * g for b, g in zip(self.biases, grads.biases))
        return MlpParams(self.spec, ws, bs)


class Grads(NamedTuple):
    weights: list
    biases: list
    inputs: np.ndarray


@dataclass
class ForwardTrace:
    """Per-layer pre-activations ``h^(l)`` and post-activations ``x^(l)``.

    ``postacts[0]`` is the input; ``preacts[l - 1]`` is ``h^(l)``.
    """

    preacts: list
    postacts: list


def mlp_init(spec: NetSpec, seed: int) -> MlpParams:
    rng = make_rng(seed)
    widths = spec.widths
    ws, bs = [], []
    for l in range(len(widths) - 1):
        ws.append(spec.sigma_w * rng.standard_normal((widths[l + 1], widths[l])))
        if spec.sigma_b == 0:
            bs.append(np.zeros(widths[l + 1]))
        else:
            bs.append(spec.sigma_b * rng.standard_normal(widths[l + 1]))
    return MlpParams(spec, tuple(ws), tuple(bs))


def forward(p: MlpParams, xs: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    """Batched forward pass; ``xs`` has shape ``(B, d)``."""
    act = p.spec.activation
    xs = np.asarray(xs, dtype=float)
    if xs.ndim != 2 or xs.shape[1] != p.spec.input_dim:
        raise ValueError(f"expected (B, {p.spec.input_dim}) inputs, got {xs.shape}")
    pre, post = [], [xs]
    z = xs
    n_layers = len(p.weights)
    for l, (w, b) in enumerate(zip(p.weights, p.biases)):
        h = z @ w.T / np.sqrt(w.shape[1]) + b
        pre.append(h)
        if l < n_layers - 1:
            z = _phi(act, h)
            post.append(z)
    return pre[-1], ForwardTrace(pre, post)


def mlp_forward(p: MlpParams, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("mlp_forward takes a single input vector")
    out, trace = forward(p, x[None, :])
    return out[0], trace


def _deltas(p: MlpParams, trace: ForwardTrace, cot: np.ndarray) -> list:
    """Back-propagated ``d(cot . f)/dh^(l)`` for every layer (batched)."""
    act = p.spec.activation
    n_layers = len(p.weights)
    deltas = [None] * n_layers
    delta = cot
    deltas[-1] = delta
    for l in range(n_layers - 1, 0, -1):
        w = p.weights[l]
        delta = (delta @ w) / np.sqrt(w.shape[1]) * _dphi(act, trace.preacts[l - 1])
        deltas[l - 1] = delta
    return deltas


def backward(p: MlpParams, trace: ForwardTrace, cot: np.ndarray) -> Grads:
    """Vector-Jacobian product of the batched outputs with ``cot`` ``(B, c)``.

    Parameter gradients are summed over the batch; input gradients are per
    row.
    """
    deltas = _deltas(p, trace, cot)
    gw = [d.T @ z / np.sqrt(z.shape[1]) for d, z in zip(deltas, trace.postacts)]
    gb = [d.sum(axis=0) for d in deltas]
    w1 = p.weights[0]
    gx = deltas[0] @ w1 / np.sqrt(w1.shape[1])
    return Grads(gw, gb, gx)


def param_jacobian(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """``df/dtheta`` as a ``(c, P)`` matrix in :meth:`MlpParams.flat` order."""
    c = p.spec.output_dim
    x = np.asarray(x, dtype=float)
    _, trace = forward(p, np.repeat(x[None, :], c, axis=0))
    deltas = _deltas(p, trace, np.eye(c))
    cols = []
    for d, z in zip(deltas, trace.postacts):
        cols.append((d[:, :, None] * z[:, None, :] / np.sqrt(z.shape[1])).reshape(c, -1))
        cols.append(d)
    return np.concatenate(cols, axis=1)


def input_jacobian(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """``df/dx`` as a ``(c, d)`` matrix."""
    c = p.spec.output_dim
    x = np.asarray(x, dtype=float)
    _, trace = forward(p, np.repeat(x[None, :], c, axis=0))
    return backward(p, trace, np.eye(c)).inputs


def _jac_factors(p: MlpParams, xs: np.ndarray):
    """Per-layer deltas for every (sample, output) row plus post-activations."""
    c = p.spec.output_dim
    m = xs.shape[0]
    _, trace = forward(p, xs)
    rep = ForwardTrace([np.repeat(h, c, axis=0) for h in trace.preacts],
                       [np.repeat(z, c, axis=0) for z in trace.postacts])
    cot = np.tile(np.eye(c), (m, 1))
    return _deltas(p, rep, cot), trace.postacts


def empirical_ntk_cross(p: MlpParams, xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    """``df(xa)/dtheta . df(xb)/dtheta^T`` as an ``(Na c, Nb c)`` matrix.

    Rows are ordered sample-major (``i * c + a``).  The parameter Jacobian is
    never materialised: for each layer the contribution factorises into an
    inner product of deltas times ``(z_a . z_b / n + 1)``.
    """
    c = p.spec.output_dim
    da, za = _jac_factors(p, np.asarray(xa, dtype=float))
    if xb is xa:
        db, zb = da, za
    else:
        db, zb = _jac_factors(p, np.asarray(xb, dtype=float))
    out = 0.0
    for l in range(len(p.weights)):
        n = za[l].shape[1]
        zz = za[l] @ zb[l].T / n + 1.0
        zz = np.repeat(np.repeat(zz, c, axis=0), c, axis=1)
        out = out + (da[l] @ db[l].T) * zz
    return out


def empirical_ntk(p: MlpParams, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    k = empirical_ntk_cross(p, xs, xs)
    return 0.5 * (k + k.T)


def empirical_ark_diag(p: MlpParams, xs: np.ndarray) -> np.ndarray:
    """``(M, c, c)`` stack of ``df(x_i)/dx . df(x_i)/dx^T``."""
    c = p.spec.output_dim
    xs = np.asarray(xs, dtype=float)
    m = xs.shape[0]
    deltas, _ = _jac_factors(p, xs)
    w1 = p.weights[0]
    jac = (deltas[0] @ w1 / np.sqrt(w1.shape[1])).reshape(m, c, -1)
    blocks = np.einsum("mad,mbd->mab", jac, jac)
    return 0.5 * (blocks + np.swapaxes(blocks, 1, 2))


# ---------------------------------------------------------------------------
# Continuous-time adversarial training (explicit Euler)
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    times: np.ndarray                 # (K,)
    train_outputs: np.ndarray         # (K, M, c) clean outputs f_t(X)
    probe_outputs: np.ndarray         # (K, P, c)
    loss_direction_norms: np.ndarray  # (K,) ||f(X_{t,S}) - y||
    final: MlpParams


def _search(p, xs, ys, etas, horizon, ds):
    """Inner ascent flow ``dx/ds = eta_i * df/dx^T (f - y)`` by explicit Euler."""
    n_inner = int(round(horizon / ds)) if horizon > 0 else 0
    if n_inner == 0 or not np.any(etas):
        return xs
    step = horizon / n_inner
    scale = (step * etas)[:, None]
    x = xs
    for _ in range(n_inner):
        out, trace = forward(p, x)
        g = backward(p, trace, out - ys).inputs
        x = x + scale * g
    return x


def gradflow_at_simulate(p0: MlpParams, xs, ys, sched, T: float, dt: float | None = None,
                         ds: float | None = None, probe_xs=None, record_every: int = 1,
                         ) -> Trajectory:
    """Simulate gradient-flow adversarial training of a finite network.

    Outer flow ``dtheta/dt = -df(X_S)/dtheta^T (f(X_S) - y)`` and inner search
    are both integrated with explicit Euler.  Defaults are ``dt = 1e-3 T`` and
    ``ds = 1e-2 S``.
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float).reshape(xs.shape[0], -1)
    probe_xs = xs[:0] if probe_xs is None else np.asarray(probe_xs, dtype=float)
    S = sched.horizon
    dt = 1e-3 * T if dt is None else dt
    ds = (1e-2 * S if S > 0 else 1.0) if ds is None else ds
    if dt <= 0 or ds <= 0:
        raise ValueError("dt and ds must be positive")
    n_steps = int(round(T / dt))
    dt = T / n_steps if n_steps else dt

    p = p0
    times, train_out, probe_out, norms = [], [], [], []

    def record(t, resid):
        times.append(t)
        train_out.append(forward(p, xs)[0])
        probe_out.append(forward(p, probe_xs)[0] if len(probe_xs) else np.zeros((0, ys.shape[1])))
        norms.append(float(np.linalg.norm(resid)) if resid is not None else np.nan)

    resid = None
    for k in range(n_steps):
        t = k * dt
        if k % record_every == 0:
            record(t, resid)
        x_adv = _search(p, xs, ys, sched.values(t), S, ds)
        out, trace = forward(p, x_adv)
        if not np.all(np.isfinite(out)) or np.max(np.abs(out)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"outputs diverged at t={t:.4g} (max |f|={np.max(np.abs(out)):.3g})")
        resid = out - ys
        grads = backward(p, trace, resid)
        p = p.axpy(-dt, grads)
    record(n_steps * dt, resid)
    return Trajectory(np.array(times), np.array(train_out), np.array(probe_out),
                      np.array(norms), p)


# ---------------------------------------------------------------------------
# Discrete minimax adversarial training (SGD + PGD)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SgdConfig:
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 128
    iters: int = 1000
    weight_decay: float = 0.0
    log_every: int = 50
    lr_decay_every: int = 0       # 0 disables step decay
    lr_decay: float = 0.1
    seed: int = 0


class MlpModel:
    """Adapter exposing ``predict`` / ``loss_grad_x`` for attacks and evaluation."""

    def __init__(self, params: MlpParams):
        self.params = params

    def predict(self, xs):
        return forward(self.params, np.atleast_2d(xs))[0]

    def loss_grad_x(self, xs, ys):
        out, trace = forward(self.params, np.atleast_2d(xs))
        return backward(self.params, trace, out - ys).inputs


def _accuracy(outputs, ys):
    return float(np.mean(np.argmax(outputs, axis=1) == np.argmax(ys, axis=1)))


def sgd_at_train(p0: MlpParams, xs, ys, pgd: PgdConfig, opt: SgdConfig,
                 probe: tuple | None = None,
                 callback: Callable[[dict], None] | None = None):
    """Minimax adversarial training with PGD inner max and SGD-momentum outer min.

    Loss per batch is the mean of ``0.5 * ||f(x') - y||^2``.  Returns the final
    parameters and a list of metric rows ``{iteration, clean_acc, robust_acc,
    loss}`` (accuracies on ``probe`` when given, else NaN).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float).reshape(xs.shape[0], -1)
    m = xs.shape[0]
    if opt.batch_size > m:
        raise ValueError("batch size exceeds dataset size")
    rng = make_rng(opt.seed)
    p = p0
    velocity = None
    rows = []
    lr = opt.lr
    for it in range(1, opt.iters + 1):
        if opt.lr_decay_every and it > 1 and (it - 1) % opt.lr_decay_every == 0:
            lr *= opt.lr_decay
        idx = rng.choice(m, size=opt.batch_size, replace=False)
        xb, yb = xs[idx], ys[idx]
        model = MlpModel(p)
        x_adv = pgd_linf(xb, yb, model.loss_grad_x, pgd)
        out, trace = forward(p, x_adv)
        resid = out - yb
        loss = 0.5 * float(np.sum(resid ** 2)) / len(idx)
        if not np.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise DivergenceError(f"training loss diverged at iteration {it}: {loss:.3g}")
        g = backward(p, trace, resid / len(idx))
        gw = [gw_ + opt.weight_decay * w for gw_, w in zip(g.weights, p.weights)]
        gb = list(g.biases)
        if velocity is None or opt.momentum == 0:
            velocity = Grads(gw, gb, None)
        else:
            velocity = Grads([opt.momentum * v + a for v, a in zip(velocity.weights, gw)],
                             [opt.momentum * v + a for v, a in zip(velocity.biases, gb)], None)
        p = p.axpy(-lr, velocity)
        if it % opt.log_every == 0 or it == opt.iters:
            row = {"iteration": it, "clean_acc": np.nan, "robust_acc": np.nan, "loss": loss}
            if probe is not None:
                px, py = probe
                pm = MlpModel(p)
                row["clean_acc"] = _accuracy(pm.predict(px), py)
                adv = pgd_linf(px, py, pm.loss_grad_x, pgd)
                row["robust_acc"] = _accuracy(pm.predict(adv), py)
            rows.append(row)
            log.info("iter %d loss %.4f clean %.3f robust %.3f", it, loss,
                     row["clean_acc"], row["robust_acc"])
            if callback is not None:
                callback(row)
    return p, rows
