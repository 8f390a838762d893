"""Procedural class-conditional images (32x32 grayscale Gaussian blobs)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# per-class blob centres in unit coordinates, with a shared radius per class
_LAYOUTS = {
    0: ([(0.5, 0.5)], 0.22),
    1: ([(0.5, 0.25), (0.5, 0.75)], 0.12),
    2: ([(0.25, 0.5), (0.75, 0.5)], 0.12),
    3: ([(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)], 0.08),
}


def render(label: int, rng: np.random.Generator, size: int = 32,
           noise: float = 0.05) -> np.ndarray:
    centres, radius = _LAYOUTS[label % len(_LAYOUTS)]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / (size - 1)
    img = np.zeros((size, size))
    jitter = rng.normal(0.0, 0.04, size=(len(centres), 2))
    amps = rng.uniform(0.7, 1.0, size=len(centres))
    r = radius * rng.uniform(0.85, 1.15)
    for (cy, cx), (jy, jx), a in zip(centres, jitter, amps):
        img += a * np.exp(-((yy - cy - jy) ** 2 + (xx - cx - jx) ** 2) / (2 * r * r))
    img += noise * rng.standard_normal((size, size))
    return img


@dataclass
class SyntheticDataset:
    """Images and labels generated from per-sample streams ``(seed, index)``.

    A sample never depends on which other samples were drawn, so any subset
    can be rebuilt on its own.
    """

    n: int
    seed: int = 0
    image_size: int = 32
    n_classes: int = 4

    def __post_init__(self):
        self.images = np.empty((self.n, self.image_size, self.image_size), dtype=np.float32)
        self.labels = np.empty(self.n, dtype=np.int64)
        for i in range(self.n):
            self.images[i], self.labels[i] = self.sample(i)

    def sample(self, index: int):
        rng = np.random.default_rng([self.seed, index])
        label = int(rng.integers(self.n_classes))
        return render(label, rng, self.image_size).astype(np.float32), label

    def __len__(self):
        return self.n


TRAIN_SIZE = 8192
EVAL_SIZE = 1024


def make_splits(seed: int = 0, n_train: int = TRAIN_SIZE, n_eval: int = EVAL_SIZE):
    """Train/eval splits drawn from disjoint seed streams."""
    return (SyntheticDataset(n_train, seed=2 * seed),
            SyntheticDataset(n_eval, seed=2 * seed + 1))
