"""Experiment configuration: a strict JSON schema validated with pydantic.

Unknown keys are rejected at every level.  The config hash stamped on every
output is the SHA-256 of the canonical JSON form of the validated config
(sorted keys, no whitespace) without ``output_dir``, so two files that
differ only in formatting or destination share a hash.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..attacks import PgdConfig
from ..dynamics import RateSchedule, rate_from_dict
from ..kernels import NetSpec

__all__ = [
    "ExperimentConfig",
    "NetSection",
    "ScheduleSection",
    "PgdSection",
    "BlobsSource",
    "ReferenceSource",
    "RecordsSource",
    "TGridSection",
    "SgdSection",
    "load_config",
    "config_hash",
    "EXPERIMENTS",
]

EXPERIMENTS = ("kernel-check", "dynamics-check", "degeneration", "train-advntk", "train-at", "eval")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetSection(_Strict):
    depth: int = Field(ge=1)
    input_dim: Optional[int] = Field(default=None, ge=1)   # None: take it from the dataset
    output_dim: Optional[int] = Field(default=None, ge=1)
    activation: Literal["erf", "relu"] = "erf"
    sigma_w: float = Field(default=1.76, gt=0)
    sigma_b: float = Field(default=0.18, ge=0)
    hidden_width: int = Field(default=512, ge=1)

    def build(self, d: int, c: int) -> NetSpec:
        if self.input_dim is not None and self.input_dim != d:
            raise ValueError(f"net.input_dim={self.input_dim} but the dataset has d={d}")
        if self.output_dim is not None and self.output_dim != c:
            raise ValueError(f"net.output_dim={self.output_dim} but the dataset has c={c}")
        return NetSpec(self.depth, d, c, self.activation, self.sigma_w, self.sigma_b,
                       self.hidden_width)


class ScheduleSection(_Strict):
    """Either one ``eta`` shared by every sample or a per-sample ``etas`` list.

    Entries of ``etas`` are numbers (constant) or objects such as
    ``{"kind": "sinusoid", "a": 0.5, "b": 0.1, "omega": 2.0}``.
    """

    horizon_S: float = Field(ge=0)
    eta: Optional[float] = None
    etas: Optional[list[Union[float, dict]]] = None
    allow_kinks: bool = False

    @model_validator(mode="after")
    def _one_of(self):
        if (self.eta is None) == (self.etas is None):
            raise ValueError("give exactly one of 'eta' and 'etas'")
        if self.etas is not None:
            for e in self.etas:
                rate_from_dict(e)
        return self

    def build(self, m: int) -> RateSchedule:
        if self.eta is not None:
            return RateSchedule.constant(m, self.eta, self.horizon_S)
        if len(self.etas) != m:
            raise ValueError(f"schedule has {len(self.etas)} rates for {m} samples")
        return RateSchedule([rate_from_dict(e) for e in self.etas], self.horizon_S,
                            allow_kinks=self.allow_kinks)


class PgdSection(_Strict):
    rho: float = Field(ge=0)
    steps: int = Field(default=10, ge=1)
    alpha: Optional[float] = Field(default=None, gt=0)
    clamp_box: Optional[tuple[float, float]] = None
    random_start: bool = False

    def build(self) -> PgdConfig:
        return PgdConfig(self.rho, self.steps, self.alpha, self.clamp_box, self.random_start)


class BlobsSource(_Strict):
    kind: Literal["blobs"]
    n_per_class: int = Field(ge=1)
    test_n_per_class: int = Field(default=200, ge=1)
    d: int = Field(ge=1)
    classes: int = Field(default=2, ge=2)
    sep: float = Field(default=3.0, ge=0)
    noise: float = Field(default=1.0, gt=0)


class ReferenceSource(_Strict):
    kind: Literal["reference"]
    m: int = Field(default=8, ge=1)
    d: int = Field(default=4, ge=1)
    n_probe: int = Field(default=4, ge=1)
    seed: int = 0


class RecordsSource(_Strict):
    """CIFAR-10 binary files, or any pre-converted set with the same record layout."""

    kind: Literal["cifar10", "records"]
    train_paths: list[str]
    test_paths: list[str]
    subset_m: Optional[int] = Field(default=None, ge=1)
    test_subset_m: Optional[int] = Field(default=None, ge=1)
    check_histogram: bool = False


DatasetSource = Annotated[Union[BlobsSource, ReferenceSource, RecordsSource],
                          Field(discriminator="kind")]


class TGridSection(_Strict):
    """Geometric grid in baseline time units (see ``geometric_t_grid``)."""

    a_min: float = Field(default=1e-2, gt=0)
    a_max: float = Field(default=1e3, gt=0)
    n: int = Field(default=26, ge=2)


class SgdSection(_Strict):
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    batch_size: int = Field(default=128, ge=1)
    iters: int = Field(default=1000, ge=1)
    weight_decay: float = Field(default=0.0, ge=0)
    log_every: int = Field(default=50, ge=1)
    lr_decay_every: int = Field(default=0, ge=0)
    lr_decay: float = Field(default=0.1, gt=0)


class ExperimentConfig(_Strict):
    experiment: Literal["kernel-check", "dynamics-check", "degeneration", "train-advntk",
                        "train-at", "eval"]
    name: str = ""
    seed: int = Field(default=0, ge=0)
    output_dir: str = "out"
    net: NetSection
    dataset: Optional[DatasetSource] = None
    schedule: Optional[ScheduleSection] = None
    pgd: Optional[PgdSection] = None

    # kernel-check
    n_points: int = Field(default=16, ge=1)
    point_dim: int = Field(default=16, ge=1)
    widths: list[int] = Field(default_factory=lambda: [64, 256, 1024, 4096])
    n_seeds: int = Field(default=10, ge=1)

    # dynamics-check / degeneration
    T: float = Field(default=2.0, gt=0)
    dt: float = Field(default=1e-3, gt=0)
    inner_steps: int = Field(default=10, ge=1)
    quad_steps: int = Field(default=64, ge=2)
    init_seed: int = 0
    linearization_T: float = Field(default=1.0, gt=0)
    linearization_widths: list[int] = Field(default_factory=list)
    linearization_dt: float = Field(default=1e-3, gt=0)
    linearization_ds: Optional[float] = Field(default=None, gt=0)
    linearization_record_every: int = Field(default=50, ge=1)
    t_grid: TGridSection = TGridSection()
    large_eta_ratio: float = Field(default=1e20, gt=1)

    # train-advntk / train-at / eval
    iters: int = Field(default=50, ge=1)
    lr: float = Field(default=0.1, gt=0)
    batch: int = Field(default=128, ge=1)
    m_val: int = Field(default=80, ge=1)
    method: Literal["eigh", "pade"] = "eigh"
    n_repeats: int = Field(default=1, ge=1)
    sgd: SgdSection = SgdSection()
    model_path: Optional[str] = None

    @model_validator(mode="after")
    def _needs(self):
        need = {
            "dynamics-check": ("dataset", "schedule"),
            "degeneration": ("dataset", "schedule"),
            "train-advntk": ("dataset", "pgd"),
            "train-at": ("dataset", "pgd"),
            "eval": ("dataset", "pgd", "model_path"),
        }.get(self.experiment, ())
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"experiment {self.experiment!r} requires {', '.join(missing)}")
        if self.quad_steps % 2:
            raise ValueError("quad_steps must be even")
        if self.widths != sorted(set(self.widths)):
            raise ValueError("widths must be strictly increasing")
        return self

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True,
                          separators=(",", ":"))


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(cfg.canonical_json().encode()).hexdigest()[:16]


def load_config(path, **overrides) -> ExperimentConfig:
    """Read and validate a JSON config; ``overrides`` replace top-level keys."""
    raw = json.loads(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ValueError("config root must be a JSON object")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.model_validate(raw)
