"""Desk-scale synthetic benchmark: Gaussian blobs with optional label noise."""

from __future__ import annotations

import numpy as np

from .data import EmbeddingDataset


def make_blobs(
    m: int,
    noise: float = 0.0,
    seed: int = 0,
    n_classes: int = 2,
    dim: int = 2,
    separation: float = 10.0,
    sigma: float = 1.0,
) -> EmbeddingDataset:
    """Balanced isotropic blobs, one per class, with centers ``separation``
    apart along successive axes.  ``noise`` is the fraction of points whose
    label is flipped to a different (uniformly chosen) class.
    """
    if m < n_classes:
        raise ValueError(f"m={m} is smaller than n_classes={n_classes}")
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    centers = np.zeros((n_classes, dim))
    for k in range(n_classes):
        centers[k, k % dim] = separation * (k // dim + 1) if k else 0.0
    labels = np.arange(m) % n_classes
    points = centers[labels] + sigma * rng.standard_normal((m, dim))
    n_flip = int(round(noise * m))
    flip = rng.choice(m, size=n_flip, replace=False)
    shift = rng.integers(1, n_classes, size=n_flip)
    labels = labels.copy()
    labels[flip] = (labels[flip] + shift) % n_classes
    # float32 round trip so in-memory and on-disk datasets agree exactly
    points = points.astype(np.float32).astype(np.float64)
    width = len(str(m - 1))
    return EmbeddingDataset(
        points=points,
        labels=labels,
        ids=tuple(f"p{i:0{width}d}" for i in range(m)),
        classes=tuple(f"c{k}" for k in range(n_classes)),
    )
