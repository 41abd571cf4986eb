"""In-memory datasets and synthetic two-class generators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ValueError("images and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(slice(0, n_first)), self.subset(slice(n_first, None))

    def batches(self, batch_size: int, rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i : i + batch_size]
            yield self.images[idx], self.labels[idx]


def _symmetric_pattern(rng: np.random.Generator, shape) -> np.ndarray:
    H, W, C = shape
    half = rng.integers(0, 2, size=(H, (W + 1) // 2, C))
    return np.concatenate([half, half[:, : W // 2][:, ::-1]], axis=1).astype(bool)


def make_margin_blobs(
    n: int,
    shape: tuple[int, int, int] = (8, 8, 3),
    margin: float = 0.4,
    sigma: float = 0.08,
    seed: int = 0,
    pattern_seed: int = 1234,
) -> Dataset:
    """Two classes whose pixels sit in disjoint intensity bands.

    A fixed, horizontally symmetric binary pattern decides per pixel whether
    class 0 is in the low band [0, (1-m)/2] and class 1 in the high band
    [(1+m)/2, 1], or vice versa. Every pixel of any class-0 image therefore
    differs by at least ``margin`` from the same pixel of any class-1 image,
    so a classifier robust to linf perturbations of margin/2 exists. Values
    are 8-bit quantized (rounded away from the gap) so the dataset survives
    the u8 file format unchanged.
    """
    if not 0 <= margin < 1:
        raise ValueError("margin must be in [0, 1)")
    pattern = _symmetric_pattern(np.random.default_rng(pattern_seed), shape)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    lo_max = int(np.floor(255 * (1 - margin) / 2))
    hi_min = int(np.ceil(255 * (1 + margin) / 2))
    high = pattern[None] ^ labels[:, None, None, None].astype(bool)
    noise = rng.normal(size=(n,) + tuple(shape)) * sigma * 255
    lo_vals = np.clip(np.round(lo_max / 2 + noise), 0, lo_max)
    hi_vals = np.clip(np.round((hi_min + 255) / 2 + noise), hi_min, 255)
    u8 = np.where(high, hi_vals, lo_vals)
    return Dataset(u8 / 255.0, labels, 2)


def make_blobs(
    n: int,
    shape: tuple[int, int, int] = (8, 8, 3),
    sigma: float = 0.15,
    num_classes: int = 2,
    seed: int = 0,
    pattern_seed: int = 1234,
) -> Dataset:
    """Gaussian blobs around random per-class mean images, no guaranteed margin."""
    means = np.random.default_rng(pattern_seed).uniform(0.2, 0.8, size=(num_classes,) + tuple(shape))
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, num_classes, size=n)
    x = means[labels] + sigma * rng.normal(size=(n,) + tuple(shape))
    return Dataset(np.round(np.clip(x, 0, 1) * 255) / 255.0, labels, num_classes)


def linf_class_margin(ds: Dataset) -> float:
    """Smallest linf distance between images of different classes (brute force)."""
    x = ds.images.reshape(len(ds), -1)
    best = np.inf
    for c in np.unique(ds.labels):
        a = x[ds.labels == c]
        b = x[ds.labels != c]
        if len(a) == 0 or len(b) == 0:
            continue
        for row in a:
            best = min(best, float(np.abs(b - row).max(axis=1).min()))
    return best
