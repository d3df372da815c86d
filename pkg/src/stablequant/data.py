"""Seeded synthetic datasets: small textured/blob images and SBM graphs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import Graph


@dataclass
class ImageData:
    x: np.ndarray  # (N, C, H, W)
    y: np.ndarray  # (N,)
    num_classes: int


def _check_image_params(n, classes, channels, size):
    if n < 1:
        raise ValueError("dataset size must be positive")
    if not 2 <= classes <= 4:
        raise ValueError(f"classes must be in 2..4, got {classes}")
    if not 1 <= channels <= 3:
        raise ValueError(f"channels must be in 1..3, got {channels}")
    if size < 4 or size % 4:
        raise ValueError("image size must be a positive multiple of 4")


def _blob_centers(classes, size):
    q = size / 4
    corners = [(q, q), (q, 3 * q), (3 * q, q), (3 * q, 3 * q)]
    return corners[:classes]


def make_images(n: int = 1024, classes: int = 4, channels: int = 1, size: int = 16,
                noise: float = 0.3, kind: str = "textures", seed: int = 0) -> ImageData:
    """Class-conditional patterns plus Gaussian noise.

    ``textures``: oriented sinusoidal gratings, one orientation per class,
    random phase and a jittered frequency. ``blobs``: one Gaussian bump per
    image centred in a class-specific quadrant.
    """
    _check_image_params(n, classes, channels, size)
    if noise < 0:
        raise ValueError("noise must be non-negative")
    rng = np.random.default_rng(seed)
    y = np.arange(n) % classes
    rng.shuffle(y)
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    x = np.empty((n, channels, size, size))
    chan_gain = 1.0 - 0.25 * np.arange(channels)
    if kind == "textures":
        theta = np.pi * y / classes + rng.uniform(-0.1, 0.1, n)
        freq = 2 * np.pi / rng.uniform(3.5, 5.0, n)
        phase = rng.uniform(0, 2 * np.pi, n)
        proj = (np.cos(theta)[:, None, None] * ii + np.sin(theta)[:, None, None] * jj)
        base = np.sin(freq[:, None, None] * proj + phase[:, None, None])
    elif kind == "blobs":
        centers = np.asarray(_blob_centers(classes, size))[y]
        centers = centers + (rng.uniform(-1, 1, (n, 2)) if noise > 0 else 0)
        r2 = (ii - centers[:, 0, None, None]) ** 2 + (jj - centers[:, 1, None, None]) ** 2
        base = np.exp(-r2 / (2 * (size / 8) ** 2))
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    x[:] = base[:, None] * chan_gain[None, :, None, None]
    x += noise * rng.standard_normal(x.shape)
    return ImageData(x, y.astype(np.int64), classes)


@dataclass
class GraphData:
    graph: Graph
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int


def make_sbm(n: int = 200, blocks: int = 4, p_in: float = 0.1, p_out: float = 0.01,
             features: int = 16, feature_noise: float = 1.0, train_per_class: int = 10,
             seed: int = 0) -> GraphData:
    """Stochastic block model; node features are block means plus noise.

    Labels are block memberships. ``train_per_class`` labelled nodes per
    class, then 10% of the rest for validation, the remainder for testing.
    """
    if not 2 <= blocks <= n:
        raise ValueError("need 2 <= blocks <= n")
    if not (0 <= p_out <= 1 and 0 <= p_in <= 1):
        raise ValueError("edge probabilities must be in [0, 1]")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % blocks
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(len(iu)) < prob
    edges = np.stack([iu[keep], ju[keep]], axis=1)
    means = rng.standard_normal((blocks, features))
    x = means[labels] + feature_noise * rng.standard_normal((n, features))
    train = np.zeros(n, dtype=bool)
    for c in range(blocks):
        idx = np.flatnonzero(labels == c)
        train[rng.choice(idx, size=min(train_per_class, len(idx)), replace=False)] = True
    rest = rng.permutation(np.flatnonzero(~train))
    n_val = max(1, int(math.ceil(0.1 * len(rest))))
    val = np.zeros(n, dtype=bool)
    val[rest[:n_val]] = True
    test = ~(train | val)
    return GraphData(Graph(n, edges, x, labels.astype(np.int64)), train, val, test, blocks)


def split_holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic (train_idx, holdout_idx) permutation split."""
    if not 0 <= fraction < 1:
        raise ValueError("holdout fraction must be in [0, 1)")
    perm = np.random.default_rng(seed).permutation(n)
    k = int(round(fraction * n))
    return np.sort(perm[k:]), np.sort(perm[:k])
