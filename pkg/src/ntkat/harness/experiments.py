"""Experiment runners shared by the CLI and the acceptance tests.

Each ``run_*`` function takes a validated :class:`ExperimentConfig`, writes
its artifacts into ``out_dir`` and returns the summary dict it wrote.  The
computational cores are separate functions so tests can call them with
explicit arguments.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..advntk import AdvNtkModel, NtkRegressor, advntk_train, load_model, make_split, save_model
from ..attacks import PgdConfig, pgd_linf
from ..dynamics import (
    LinearizedState,
    RateSchedule,
    at_closed_form,
    degeneration_limit_check,
    geometric_t_grid,
    ode_oracle_linearized,
    xi_matrix,
)
from ..finite_net import (
    MlpModel,
    SgdConfig,
    empirical_ark_diag,
    empirical_ntk,
    empirical_ntk_cross,
    forward,
    gradflow_at_simulate,
    make_rng,
    mlp_init,
    sgd_at_train,
)
from ..kernels import NetSpec, ark_diag, ntk_gram
from .config import ExperimentConfig, config_hash
from .data import Dataset, load_raw_records, load_synthetic_blobs, reference_dataset
from .io import write_csv, write_json

log = logging.getLogger(__name__)

__all__ = [
    "eval_robust_accuracy",
    "fixed_points",
    "kernel_convergence",
    "ReferenceInstance",
    "reference_instance",
    "closed_form_vs_ode",
    "linearization_sweep",
    "large_perturbation_schedule",
    "load_datasets",
    "advntk_vs_ntk",
    "RUNNERS",
]


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def eval_robust_accuracy(model, data: Dataset, pgd: PgdConfig, batch: int = 512):
    """Clean and PGD-robust accuracy of ``argmax model.predict(x)``.

    ``model`` must provide ``predict(xs)`` and ``loss_grad_x(xs, ys)`` (the
    gradient of the squared loss against the one-hot target).  Returns
    ``(clean_acc, robust_acc)``.
    """
    labels = data.labels
    clean = robust = 0
    for lo in range(0, len(data), batch):
        xs, ys = data.xs[lo:lo + batch], data.ys[lo:lo + batch]
        lab = labels[lo:lo + batch]
        clean += int(np.sum(np.argmax(model.predict(xs), axis=1) == lab))
        if pgd.rho == 0:
            continue
        adv = pgd_linf(xs, ys, model.loss_grad_x, pgd)
        robust += int(np.sum(np.argmax(model.predict(adv), axis=1) == lab))
    if pgd.rho == 0:
        robust = clean
    return clean / len(data), robust / len(data)


# ---------------------------------------------------------------------------
# Kernel convergence
# ---------------------------------------------------------------------------

def fixed_points(n: int = 16, d: int = 16, seed: int = 0) -> np.ndarray:
    return make_rng(seed).standard_normal((n, d))


def kernel_convergence(spec: NetSpec, xs, widths, seeds) -> list[dict]:
    """Relative Frobenius error of empirical NTK / ARK diagonal vs the analytic limit."""
    c = spec.output_dim
    ntk_ref = ntk_gram(spec, xs).materialize()
    ark_ref = ark_diag(spec, xs)[:, None, None] * np.eye(c)
    rows = []
    for w in widths:
        s = spec.with_width(w)
        e_ntk, e_ark = [], []
        for seed in seeds:
            p = mlp_init(s, seed)
            e_ntk.append(np.linalg.norm(empirical_ntk(p, xs) - ntk_ref) / np.linalg.norm(ntk_ref))
            e_ark.append(np.linalg.norm(empirical_ark_diag(p, xs) - ark_ref) / np.linalg.norm(ark_ref))
        rows.append({"width": w, "ntk_rel_err": float(np.mean(e_ntk)),
                     "ntk_rel_err_std": float(np.std(e_ntk)),
                     "ark_rel_err": float(np.mean(e_ark)),
                     "ark_rel_err_std": float(np.std(e_ark)), "n_seeds": len(seeds)})
        log.info("width %d: ntk %.4f ark %.4f", w, rows[-1]["ntk_rel_err"], rows[-1]["ark_rel_err"])
    return rows


# ---------------------------------------------------------------------------
# Reference dynamics instance
# ---------------------------------------------------------------------------

@dataclass
class ReferenceInstance:
    spec: NetSpec
    data: Dataset
    probe: np.ndarray
    params: object
    state: LinearizedState
    cross: np.ndarray      # empirical Theta(probe, X), (P c, M c)
    f0_probe: np.ndarray   # (P c,)


def reference_instance(width: int = 512, init_seed: int = 0, m: int = 8, d: int = 4,
                       n_probe: int = 4, data_seed: int = 0, depth: int = 1,
                       activation: str = "erf") -> ReferenceInstance:
    """Small regression problem with a finite Erf network and its kernels at init."""
    data, probe = reference_dataset(m, d, n_probe, data_seed)
    spec = NetSpec(depth, d, data.c, activation, hidden_width=width)
    p = mlp_init(spec, init_seed)
    state = LinearizedState.from_network(p, data.xs, data.ys)
    cross = empirical_ntk_cross(p, probe, data.xs)
    return ReferenceInstance(spec, data, probe, p, state, cross, forward(p, probe)[0].ravel())


def closed_form_vs_ode(inst: ReferenceInstance, sched: RateSchedule, T: float, dts,
                       inner_steps: int = 10) -> list[dict]:
    """Max-abs gap between ``at_closed_form`` and the RK4 oracle for each ``dt``."""
    cf = at_closed_form(inst.state, xi_matrix(inst.state, sched, T), inst.cross, inst.f0_probe)
    rows = []
    for dt in dts:
        ode = ode_oracle_linearized(inst.state, sched, T, dt, inner_steps, inst.cross, inst.f0_probe)
        rows.append({"dt": float(dt), "max_abs_gap": float(np.max(np.abs(cf - ode)))})
    return rows


def linearization_sweep(data: Dataset, probe, sched: RateSchedule, spec: NetSpec, widths, seeds,
                        T: float = 1.0, dt: float = 1e-3, ds: float | None = None,
                        record_every: int = 50) -> list[dict]:
    """``sup_t max |f_t(probe) - f^lin_t(probe)|`` per width, averaged over init seeds.

    ``f_t`` comes from :func:`gradflow_at_simulate`; ``f^lin_t`` is the closed
    form built from the same network's empirical kernels at initialisation.
    """
    rows = []
    for w in widths:
        s = spec.with_width(w)
        devs = []
        t0 = time.perf_counter()
        for seed in seeds:
            p = mlp_init(s, seed)
            tr = gradflow_at_simulate(p, data.xs, data.ys, sched, T, dt=dt, ds=ds,
                                      probe_xs=probe, record_every=record_every)
            state = LinearizedState.from_network(p, data.xs, data.ys)
            cross = empirical_ntk_cross(p, probe, data.xs)
            f0p = forward(p, probe)[0].ravel()
            dev = 0.0
            for t, fp in zip(tr.times, tr.probe_outputs):
                lin = at_closed_form(state, xi_matrix(state, sched, t), cross, f0p)
                dev = max(dev, float(np.max(np.abs(fp.ravel() - lin))))
            devs.append(dev)
        rows.append({"width": w, "sup_dev_mean": float(np.mean(devs)),
                     "sup_dev_median": float(np.median(devs)),
                     "sup_dev_max": float(np.max(devs)), "n_seeds": len(devs),
                     "seconds": time.perf_counter() - t0})
        log.info("width %d: mean sup deviation %.4g", w, rows[-1]["sup_dev_mean"])
    return rows


def large_perturbation_schedule(state: LinearizedState, sched: RateSchedule,
                                ratio: float = 1e20, index: int = 0) -> RateSchedule:
    """Raise ``eta_index`` until its growth rate ``exp(D eta S)`` beats all others by ``ratio``.

    Then ``A(t)`` has entries of order ``1/ratio`` and ``H`` is numerically
    rank deficient, the large-perturbation regime in which the AT
    regularisation keeps an effect at all times.
    """
    if not sched.all_constant or sched.horizon <= 0:
        raise ValueError("needs constant rates and S > 0")
    lam = np.array([np.linalg.eigvalsh(b) for b in state.ark_blocks])
    etas = sched.values(0.0)
    growth = lam * etas[:, None] * sched.horizon
    others = np.delete(growth, index, axis=0).max()
    need = (others + np.log(ratio)) / (lam[index].min() * sched.horizon)
    etas = etas.copy()
    etas[index] = max(etas[index], need)
    return RateSchedule.from_values(etas, sched.horizon)


# ---------------------------------------------------------------------------
# Datasets and the Adv-NTK comparison
# ---------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    """``(train, test)`` for the configured source."""
    src = cfg.dataset
    if src.kind == "blobs":
        train = load_synthetic_blobs(src.n_per_class, src.d, src.classes, src.sep, seed, src.noise)
        test = load_synthetic_blobs(src.test_n_per_class, src.d, src.classes, src.sep,
                                    seed + 1000, src.noise)
        return train, test
    if src.kind == "reference":
        train, probe = reference_dataset(src.m, src.d, src.n_probe, src.seed)
        return train, Dataset(probe, np.zeros((len(probe), train.c)), name="probe")
    expect = 5000 if src.check_histogram else None
    train = load_raw_records(src.train_paths, src.subset_m, seed, src.kind, expect)
    test = load_raw_records(src.test_paths, src.test_subset_m, seed, src.kind)
    return train, test


def advntk_vs_ntk(train: Dataset, test: Dataset, spec: NetSpec, pgd: PgdConfig, m_val: int,
                  iters: int, lr: float, batch: int, seed: int, method: str = "eigh"):
    """Train Adv-NTK and build the NTK baseline on the full training set.

    Returns ``(model, training rows, summary)``.
    """
    plan = make_split(len(train), m_val, seed)
    t0 = time.perf_counter()
    model, rows = advntk_train(train.xs, train.ys, spec, plan, pgd, iters, lr, batch, seed, method)
    t_train = time.perf_counter() - t0
    ntk = NtkRegressor(spec, train.xs, train.ys)
    a_clean, a_rob = eval_robust_accuracy(model, test, pgd)
    n_clean, n_rob = eval_robust_accuracy(ntk, test, pgd)
    summary = {"seed": seed, "advntk_clean_acc": a_clean, "advntk_robust_acc": a_rob,
               "ntk_clean_acc": n_clean, "ntk_robust_acc": n_rob,
               "robust_gap": a_rob - n_rob, "train_seconds": t_train,
               "m_opt": len(plan.indices_opt), "m_val": m_val}
    log.info("seed %d: Adv-NTK robust %.4f, NTK robust %.4f", seed, a_rob, n_rob)
    return model, rows, summary


# ---------------------------------------------------------------------------
# CLI runners
# ---------------------------------------------------------------------------

def _header(cfg: ExperimentConfig, seed: int) -> dict:
    return {"experiment": cfg.experiment, "name": cfg.name, "seed": seed,
            "config_hash": config_hash(cfg), "config": cfg.model_dump(mode="json")}


def run_kernel_check(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    xs = fixed_points(cfg.n_points, cfg.point_dim, seed)
    spec = cfg.net.build(cfg.point_dim, cfg.net.output_dim or 1)
    rows = kernel_convergence(spec, xs, cfg.widths, list(range(cfg.n_seeds)))
    h = config_hash(cfg)
    write_csv(out / "kernel_check.csv", rows, h)
    ntk = [r["ntk_rel_err"] for r in rows]
    ark = [r["ark_rel_err"] for r in rows]
    summary = _header(cfg, seed) | {
        "ntk_strictly_decreasing": bool(np.all(np.diff(ntk) < 0)),
        "ark_strictly_decreasing": bool(np.all(np.diff(ark) < 0)),
        "final_ntk_rel_err": ntk[-1], "final_ark_rel_err": ark[-1],
    }
    write_json(out / "kernel_check.json", summary)
    return summary


def _reference(cfg: ExperimentConfig, width: int | None = None) -> ReferenceInstance:
    src = cfg.dataset
    if src.kind != "reference":
        raise ValueError("dynamics experiments need a 'reference' dataset source")
    return reference_instance(width or cfg.net.hidden_width, cfg.init_seed, src.m, src.d,
                              src.n_probe, src.seed, cfg.net.depth, cfg.net.activation)


def run_dynamics_check(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    inst = _reference(cfg)
    sched = cfg.schedule.build(len(inst.data))
    h = config_hash(cfg)
    rows = closed_form_vs_ode(inst, sched, cfg.T, [cfg.dt, cfg.dt / 2], cfg.inner_steps)
    write_csv(out / "closed_form_vs_ode.csv", rows, h)
    summary = _header(cfg, seed) | {
        "max_abs_gap": rows[0]["max_abs_gap"],
        "max_abs_gap_half_dt": rows[1]["max_abs_gap"],
        "halving_halves": rows[1]["max_abs_gap"] <= 0.5 * rows[0]["max_abs_gap"],
    }
    if cfg.linearization_widths:
        spec = inst.spec
        lrows = linearization_sweep(inst.data, inst.probe, sched, spec, cfg.linearization_widths,
                                    [seed + k for k in range(cfg.n_seeds)], cfg.linearization_T,
                                    cfg.linearization_dt, cfg.linearization_ds,
                                    cfg.linearization_record_every)
        write_csv(out / "linearization_sweep.csv", lrows, h)
        means = [r["sup_dev_mean"] for r in lrows]
        summary["linearization_decreasing"] = bool(np.all(np.diff(means) < 0))
        summary["linearization_sup_dev_mean"] = means
    write_json(out / "dynamics_check.json", summary)
    return summary


def run_degeneration(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    inst = _reference(cfg)
    sched = cfg.schedule.build(len(inst.data))
    g = cfg.t_grid
    grid = geometric_t_grid(inst.state, sched, g.a_min, g.a_max, g.n)
    rep = degeneration_limit_check(inst.state, sched, grid, inst.cross, inst.f0_probe,
                                   cfg.quad_steps)
    h = config_hash(cfg)
    write_csv(out / "degeneration.csv", rep.rows(), h)
    big = large_perturbation_schedule(inst.state, sched, cfg.large_eta_ratio)
    grid_big = geometric_t_grid(inst.state, big, g.a_min, g.a_max, g.n)
    rep_big = degeneration_limit_check(inst.state, big, grid_big, inst.cross, inst.f0_probe,
                                       cfg.quad_steps)
    write_csv(out / "degeneration_large_eta.csv", rep_big.rows(), h)
    summary = _header(cfg, seed) | {"reference": rep.summary(), "large_eta": rep_big.summary(),
                                    "large_eta_values": big.values(0.0)}
    write_json(out / "degeneration.json", summary)
    return summary


def run_train_advntk(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    pgd = cfg.pgd.build()
    h = config_hash(cfg)
    results = []
    for r in range(cfg.n_repeats):
        s = seed + r
        train, test = load_datasets(cfg, s)
        spec = cfg.net.build(train.d, train.c)
        model, rows, summ = advntk_vs_ntk(train, test, spec, pgd, cfg.m_val, cfg.iters, cfg.lr,
                                          cfg.batch, s, cfg.method)
        write_csv(out / f"advntk_train_seed{s}.csv", rows, h)
        save_model(model, out / f"advntk_model_seed{s}.json")
        results.append(summ)
    write_csv(out / "advntk_vs_ntk.csv", results, h)
    summary = _header(cfg, seed) | {
        "runs": results,
        "mean_advntk_robust_acc": float(np.mean([r["advntk_robust_acc"] for r in results])),
        "mean_ntk_robust_acc": float(np.mean([r["ntk_robust_acc"] for r in results])),
        "mean_robust_gap": float(np.mean([r["robust_gap"] for r in results])),
    }
    write_json(out / "advntk_summary.json", summary)
    return summary


def run_train_at(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    pgd = cfg.pgd.build()
    train, test = load_datasets(cfg, seed)
    spec = cfg.net.build(train.d, train.c)
    sg = cfg.sgd
    opt = SgdConfig(sg.lr, sg.momentum, min(sg.batch_size, len(train)), sg.iters, sg.weight_decay,
                    sg.log_every, sg.lr_decay_every, sg.lr_decay, seed)
    probe = test.subset(np.arange(min(256, len(test))))
    p0 = mlp_init(spec, seed)
    params, rows = sgd_at_train(p0, train.xs, train.ys, pgd, opt, probe=(probe.xs, probe.ys))
    h = config_hash(cfg)
    write_csv(out / "at_train.csv", rows, h, ["iteration", "clean_acc", "robust_acc", "loss"])
    np.savez(out / "at_params.npz", *params.weights, *params.biases)
    clean, robust = eval_robust_accuracy(MlpModel(params), test, pgd)
    summary = _header(cfg, seed) | {"clean_acc": clean, "robust_acc": robust,
                                    "params_file": "at_params.npz", "spec": spec.to_dict()}
    write_json(out / "at_summary.json", summary)
    return summary


def run_eval(cfg: ExperimentConfig, seed: int, out: Path) -> dict:
    pgd = cfg.pgd.build()
    model: AdvNtkModel = load_model(cfg.model_path)
    _, test = load_datasets(cfg, seed)
    clean, robust = eval_robust_accuracy(model, test, pgd)
    h = config_hash(cfg)
    row = {"model": str(cfg.model_path), "n_test": len(test), "clean_acc": clean,
           "robust_acc": robust, "rho": pgd.rho}
    write_csv(out / "eval.csv", [row], h)
    summary = _header(cfg, seed) | row
    write_json(out / "eval.json", summary)
    return summary


RUNNERS = {
    "kernel-check": run_kernel_check,
    "dynamics-check": run_dynamics_check,
    "degeneration": run_degeneration,
    "train-advntk": run_train_advntk,
    "train-at": run_train_at,
    "eval": run_eval,
}
