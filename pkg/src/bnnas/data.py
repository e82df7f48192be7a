"""Datasets: CIFAR-10 binary batches and seeded synthetic image blobs."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass

import numpy as np

from .engine import DTYPE

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    x: np.ndarray  # (N, C, H, W) float32
    y: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError(f"{len(self.x)} images but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.num_classes)

    def split(self, val_fraction: float, seed: int) -> tuple["Dataset", "Dataset"]:
        """Shuffled (train, val) split; the shuffle depends only on ``seed``."""
        perm = np.random.default_rng(seed).permutation(len(self))
        n_val = int(round(len(self) * val_fraction))
        return self.subset(np.sort(perm[n_val:])), self.subset(np.sort(perm[:n_val]))


class DataFormatError(ValueError):
    pass


def load_cifar10_binary(path, mean=CIFAR_MEAN, std=CIFAR_STD, limit: int | None = None) -> Dataset:
    """Parse a CIFAR-10 binary batch file (1 label byte + 3072 pixel bytes per record)."""
    size = os.path.getsize(path)
    if size % CIFAR_RECORD:
        raise DataFormatError(f"{path}: {size} bytes is not a multiple of {CIFAR_RECORD} (truncated file?)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0:
        log.warning("%s is empty; returning an empty dataset", path)
        return Dataset(np.zeros((0, *CIFAR_SHAPE), DTYPE), np.zeros(0, np.int64), 10)
    rec = raw.reshape(-1, CIFAR_RECORD)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise DataFormatError(f"{path}: record {bad} has label {labels[bad]} >= 10")
    pixels = rec[:, 1:].reshape(-1, *CIFAR_SHAPE).astype(DTYPE) / DTYPE(255.0)
    m = np.asarray(mean, DTYPE)[None, :, None, None]
    s = np.asarray(std, DTYPE)[None, :, None, None]
    return Dataset((pixels - m) / s, labels, 10)


def load_cifar10_files(paths, **kw) -> Dataset:
    parts = [load_cifar10_binary(p, **kw) for p in paths]
    return Dataset(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), 10)


@dataclass(frozen=True)
class SyntheticSpec:
    num_samples: int = 512
    num_classes: int = 4
    channels: int = 3
    image_size: int = 8
    separability: float = 1.0
    noise: float = 1.0


def gen_synthetic(spec: SyntheticSpec, seed: int) -> Dataset:
    """Class-conditional Gaussian images around smooth per-class prototypes.

    Each class prototype is a low-frequency random pattern scaled by
    ``separability``; samples add i.i.d. Gaussian pixel noise. Classes are
    balanced (counts differ by at most one).
    """
    if spec.num_classes < 2:
        raise ValueError("synthetic data needs at least two classes")
    rng = np.random.default_rng(seed)
    c, s, k = spec.channels, spec.image_size, spec.num_classes
    coarse = max(2, s // 4)
    protos = rng.standard_normal((k, c, coarse, coarse))
    # nearest-neighbour upsampling keeps prototypes spatially smooth
    rep = -(-s // coarse)
    protos = protos.repeat(rep, axis=2).repeat(rep, axis=3)[:, :, :s, :s]
    protos /= np.sqrt((protos ** 2).mean(axis=(1, 2, 3), keepdims=True))
    labels = np.arange(spec.num_samples) % k
    labels = labels[rng.permutation(spec.num_samples)]
    x = spec.separability * protos[labels] + spec.noise * rng.standard_normal((spec.num_samples, c, s, s))
    return Dataset(x.astype(DTYPE), labels.astype(np.int64), k)
