"""Command-line interface: exit codes, error reports and written artifacts."""
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from ntkat.harness.cli import main
from ntkat.harness.io import read_csv

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def _cfg(tmp_path, name, body):
    p = tmp_path / name
    p.write_text(json.dumps(body))
    return str(p)


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


BLOBS = {"kind": "blobs", "n_per_class": 40, "test_n_per_class": 30, "d": 3, "sep": 2.0}


class TestErrors:
    def test_missing_config(self, tmp_path, capsys):
        assert main(["kernel-check", "--config", str(tmp_path / "nope.json")]) == 2
        err = _err(capsys)
        assert err["error"] == "config_not_found" and err["exit_code"] == 2

    def test_invalid_json(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text("{not json")
        assert main(["kernel-check", "--config", str(p)]) == 2
        assert _err(capsys)["error"] == "config_parse"

    def test_schema_violation(self, tmp_path, capsys):
        p = _cfg(tmp_path, "c.json", {"experiment": "kernel-check", "net": {"depth": 0}})
        assert main(["kernel-check", "--config", p]) == 2
        assert _err(capsys)["error"] == "config_invalid"

    def test_subcommand_mismatch(self, capsys):
        assert main(["degeneration", "--config", str(CONFIGS / "kernel_check.json")]) == 2
        assert _err(capsys)["error"] == "usage"

    def test_bad_seed(self, capsys):
        assert main(["kernel-check", "--config", str(CONFIGS / "kernel_check.json"),
                     "--seed", "-1"]) == 2

    def test_bad_thread_env(self, monkeypatch, capsys):
        monkeypatch.setenv("ADVNTK_THREADS", "zero")
        assert main(["kernel-check", "--config", str(CONFIGS / "kernel_check.json")]) == 2

    def test_unknown_subcommand(self, capsys):
        assert main(["plot"]) == 2

    def test_runtime_failure_exit_1(self, tmp_path, capsys):
        p = _cfg(tmp_path, "e.json", {"experiment": "eval", "net": {"depth": 1}, "dataset": BLOBS,
                                       "pgd": {"rho": 0.1}, "model_path": str(tmp_path / "none.json")})
        assert main(["eval", "--config", p, "--out", str(tmp_path / "o")]) == 1
        assert _err(capsys)["error"] == "FileNotFoundError"


class TestRuns:
    def test_kernel_check(self, tmp_path, capsys, monkeypatch):
        monkeypatch.setenv("ADVNTK_THREADS", "1")
        p = _cfg(tmp_path, "k.json", {"experiment": "kernel-check", "net": {"depth": 3},
                                      "n_points": 6, "point_dim": 8, "widths": [32, 256, 2048],
                                      "n_seeds": 3})
        out = tmp_path / "out"
        assert main(["kernel-check", "--config", p, "--out", str(out)]) == 0
        ok = json.loads(capsys.readouterr().out)
        rows = read_csv(out / "kernel_check.csv")
        err = [float(r["ntk_rel_err"]) for r in rows]
        assert np.all(np.diff(err) < 0)
        assert all(r["config_hash"] == ok["config_hash"] for r in rows)
        summ = json.loads((out / "kernel_check.json").read_text())
        assert summ["ntk_strictly_decreasing"]

    def test_degeneration_reproducible(self, tmp_path, capsys):
        cfg = str(CONFIGS / "degeneration.json")
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["degeneration", "--config", cfg, "--out", str(a)]) == 0
        assert main(["degeneration", "--config", cfg, "--out", str(b)]) == 0
        rows = read_csv(a / "degeneration.csv")
        assert list(rows[0])[:3] == ["t", "exp_term_norm", "dist_to_standard_limit"]
        assert float(rows[-1]["exp_term_norm"]) < 1e-6
        for name in ("degeneration.csv", "degeneration_large_eta.csv"):
            assert (a / name).read_bytes() == (b / name).read_bytes()
        first = (a / "degeneration.json").read_bytes()
        assert main(["degeneration", "--config", cfg, "--out", str(a)]) == 0
        assert (a / "degeneration.json").read_bytes() == first
        summ = json.loads((a / "degeneration.json").read_text())
        assert summ["reference"]["regime"] == "degenerate"
        assert summ["large_eta"]["regime"] == "non-degenerate"

    def test_dynamics_check(self, tmp_path, capsys):
        raw = json.loads((CONFIGS / "dynamics_check.json").read_text())
        raw.update(linearization_widths=[64, 256], n_seeds=1, linearization_T=0.05,
                   linearization_record_every=10)
        p = _cfg(tmp_path, "d.json", raw)
        assert main(["dynamics-check", "--config", p, "--out", str(tmp_path / "o")]) == 0
        summ = json.loads((tmp_path / "o" / "dynamics_check.json").read_text())
        assert summ["max_abs_gap"] < 1e-4
        assert len(read_csv(tmp_path / "o" / "linearization_sweep.csv")) == 2

    def test_train_advntk_then_eval(self, tmp_path, capsys):
        train = _cfg(tmp_path, "t.json", {"experiment": "train-advntk", "net": {"depth": 2},
                                          "dataset": BLOBS, "pgd": {"rho": 0.1}, "m_val": 20,
                                          "iters": 3, "batch": 10, "n_repeats": 2})
        out = tmp_path / "o"
        assert main(["train-advntk", "--config", train, "--out", str(out), "--seed", "5"]) == 0
        assert len(read_csv(out / "advntk_vs_ntk.csv")) == 2
        assert len(read_csv(out / "advntk_train_seed5.csv")) == 3
        summ = json.loads((out / "advntk_summary.json").read_text())
        ev = _cfg(tmp_path, "e.json", {"experiment": "eval", "net": {"depth": 2}, "dataset": BLOBS,
                                       "pgd": {"rho": 0.1},
                                       "model_path": str(out / "advntk_model_seed5.json")})
        assert main(["eval", "--config", ev, "--out", str(tmp_path / "e"), "--seed", "5"]) == 0
        row = read_csv(tmp_path / "e" / "eval.csv")[0]
        assert float(row["robust_acc"]) == summ["runs"][0]["advntk_robust_acc"]

    def test_train_at(self, tmp_path, capsys):
        p = _cfg(tmp_path, "a.json", {"experiment": "train-at", "net": {"depth": 1, "hidden_width": 32},
                                      "dataset": BLOBS, "pgd": {"rho": 0.1},
                                      "sgd": {"batch_size": 16, "iters": 20, "log_every": 10}})
        out = tmp_path / "o"
        assert main(["train-at", "--config", p, "--out", str(out)]) == 0
        rows = read_csv(out / "at_train.csv")
        assert list(rows[0])[:4] == ["iteration", "clean_acc", "robust_acc", "loss"]
        assert len(np.load(out / "at_params.npz").files) == 4


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "ntkat", "kernel-check", "--config",
                           str(tmp_path / "missing.json")], capture_output=True, text=True)
    assert proc.returncode == 2
    assert json.loads(proc.stderr)["error"] == "config_not_found"
