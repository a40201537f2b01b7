"""Datasets: synthetic blobs, the small reference regression problem and
CIFAR-10 style binary record files."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..finite_net import make_rng

__all__ = [
    "Dataset",
    "DataFormatError",
    "load_synthetic_blobs",
    "reference_dataset",
    "load_cifar10_binary",
    "load_raw_records",
    "RECORD_BYTES",
]

RECORD_BYTES = 1 + 3072


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    """Inputs ``xs`` of shape ``(M, d)`` and targets ``ys`` of shape ``(M, c)``.

    ``ys.ravel()`` is the sample-major concatenation used by the kernel code.
    """

    xs: np.ndarray
    ys: np.ndarray
    name: str = ""
    normalization: str = "none"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=float)
        self.ys = np.asarray(self.ys, dtype=float)
        if self.ys.ndim == 1:
            self.ys = self.ys[:, None]
        if self.xs.ndim != 2 or self.ys.shape[0] != self.xs.shape[0]:
            raise ValueError(f"inconsistent shapes {self.xs.shape} and {self.ys.shape}")
        if not (np.all(np.isfinite(self.xs)) and np.all(np.isfinite(self.ys))):
            raise ValueError("dataset has non-finite entries")

    def __len__(self):
        return self.xs.shape[0]

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    @property
    def c(self) -> int:
        return self.ys.shape[1]

    @property
    def flat_targets(self) -> np.ndarray:
        return self.ys.ravel()

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.ys, axis=1)

    def is_one_hot(self) -> bool:
        return bool(np.all((self.ys == 0) | (self.ys == 1)) and np.all(self.ys.sum(axis=1) == 1))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.xs[idx], self.ys[idx], self.name, self.normalization, dict(self.meta))


def _one_hot(labels, classes):
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def load_synthetic_blobs(n_per_class: int, d: int, classes: int = 2, sep: float = 3.0,
                         seed: int = 0, noise: float = 1.0) -> Dataset:
    """Isotropic Gaussian classes whose means are pairwise ``sep`` apart.

    Means sit at ``sep / sqrt(2)`` times the first ``classes`` standard basis
    vectors (so ``classes <= d`` is required).  Samples are shuffled.
    """
    if classes < 2 or classes > d:
        raise ValueError("need 2 <= classes <= d")
    rng = make_rng(seed)
    means = np.zeros((classes, d))
    means[np.arange(classes), np.arange(classes)] = sep / np.sqrt(2.0)
    labels = np.repeat(np.arange(classes), n_per_class)
    xs = means[labels] + noise * rng.standard_normal((len(labels), d))
    perm = rng.permutation(len(labels))
    return Dataset(xs[perm], _one_hot(labels[perm], classes), name=f"blobs(sep={sep},seed={seed})",
                   meta={"sep": sep, "d": d, "classes": classes, "seed": seed, "noise": noise})


def reference_dataset(m: int = 8, d: int = 4, n_probe: int = 4, seed: int = 0):
    """Small regression problem used by the dynamics checks.

    Returns ``(train, probe_xs)``; inputs are standard normal and targets
    ``sin`` of a fixed random projection.
    """
    rng = make_rng(seed)
    xs = rng.standard_normal((m, d))
    w = rng.standard_normal(d) / np.sqrt(d)
    ys = np.sin(2.0 * xs @ w)[:, None]
    probe = rng.standard_normal((n_probe, d))
    return Dataset(xs, ys, name=f"reference(m={m},d={d},seed={seed})"), probe


def _read_records(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) == 0 or len(raw) % RECORD_BYTES:
        whole = (len(raw) // RECORD_BYTES) * RECORD_BYTES
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of {RECORD_BYTES}; "
            f"truncated record at byte offset {whole}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DataFormatError(
            f"{path}: invalid label {labels[bad[0]]} at byte offset {bad[0] * RECORD_BYTES}")
    return labels, arr[:, 1:]


def load_raw_records(paths: Sequence[str], subset_m: int | None = None, seed: int = 0,
                     name: str = "raw", expect_per_class: int | None = None) -> Dataset:
    """Load ``label byte + 3072 pixel bytes`` records, scale pixels to ``[0, 1]``.

    ``subset_m`` draws that many records without replacement using the
    seeded generator; ``expect_per_class`` verifies the label histogram of
    the full file set before subsetting.
    """
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    labels, pixels = [], []
    for p in paths:
        lab, pix = _read_records(p)
        labels.append(lab)
        pixels.append(pix)
    labels = np.concatenate(labels)
    pixels = np.concatenate(pixels)
    if expect_per_class is not None:
        hist = np.bincount(labels, minlength=10)
        if not np.all(hist == expect_per_class):
            raise DataFormatError(f"label histogram {hist.tolist()} != {expect_per_class} per class")
    idx = np.arange(len(labels))
    if subset_m is not None:
        if subset_m > len(labels):
            raise ValueError(f"subset of {subset_m} requested from {len(labels)} records")
        idx = np.sort(make_rng(seed).choice(len(labels), size=subset_m, replace=False))
    xs = pixels[idx].astype(float) / 255.0
    return Dataset(xs, _one_hot(labels[idx], 10), name=name, normalization="scale_0_1",
                   meta={"paths": [str(p) for p in paths], "subset_m": subset_m, "seed": seed,
                         "indices": idx})


def load_cifar10_binary(paths: Sequence[str], subset_m: int | None = None, seed: int = 0,
                        check_histogram: bool = False) -> Dataset:
    """CIFAR-10 binary version (``data_batch_*.bin`` / ``test_batch.bin``).

    With ``check_histogram`` and all five training batches, the loader
    verifies the 5000-per-class label histogram.
    """
    expect = 5000 if check_histogram else None
    return load_raw_records(paths, subset_m, seed, name="cifar10", expect_per_class=expect)
