"""Synthetic long-tailed, label-noised datasets built from Gaussian class clusters."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, ExperimentConfig, substream


@dataclass
class ClusterSpec:
    means: np.ndarray
    stddev: float
    separation: float

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        if self.stddev < 0:
            raise ValueError("stddev must be non-negative")
        if self.separation <= 0:
            raise ValueError("separation must be positive")


def longtail_counts(N: int, K: int, rho: float) -> np.ndarray:
    """Per-class sample counts decaying geometrically from N/K down to N/(K*rho)."""
    if K < 2:
        raise ValueError(f"K must be ≥ 2, got {K}")
    if rho < 1:
        raise ValueError(f"rho must be ≥ 1, got {rho}")
    if N < K:
        raise ValueError(f"N must be ≥ K, got N={N}, K={K}")
    k = np.arange(K)
    raw = N / (K * rho ** (k / (K - 1)))
    # round half up, never below one sample
    counts = np.floor(raw + 0.5).astype(np.int64)
    return np.maximum(counts, 1)


def transition_matrix(counts, gamma: float) -> np.ndarray:
    """Row-stochastic T with T[i, i] = 1 - gamma and off-diagonal mass proportional to class size.

    ``T[i, j] = counts[j] * gamma / (N - counts[i])`` for ``j != i``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size < 2:
        raise ValueError("transition matrix needs at least two classes")
    if np.any(counts <= 0):
        raise ValueError("class counts must be positive")
    if not 0 <= gamma < 1:
        raise ValueError(f"gamma must be in [0, 1), got {gamma}")
    total = counts.sum()
    rest = total - counts
    if np.any(rest <= 0):
        raise ValueError("every class needs samples outside it (single-class input)")
    T = gamma * counts[None, :] / rest[:, None]
    np.fill_diagonal(T, 1.0 - gamma)
    return T


def corrupt_labels(true_labels, T, rng: np.random.Generator) -> np.ndarray:
    """Draw each observed label independently from row ``T[true_label]``."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    T = np.asarray(T, dtype=np.float64)
    if not np.allclose(T.sum(axis=1), 1.0, atol=1e-9) or np.any(T < 0):
        raise ValueError("T must be row-stochastic")
    cdf = np.cumsum(T, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(true_labels.size)
    rows = cdf[true_labels]
    observed = (u[:, None] >= rows).sum(axis=1)
    # zero-probability columns can never be hit except through cdf ties
    return np.minimum(observed, T.shape[1] - 1).astype(np.int64)


def cluster_means(K: int, dim: int, separation: float, rng: np.random.Generator) -> np.ndarray:
    """Class centers with every pairwise distance ≥ ``separation``.

    For ``dim ≥ K`` the centers sit on random orthonormal directions, so all
    pairwise distances equal ``separation`` and the centers are equidistant
    from the origin.  Smaller ``dim`` uses random directions rescaled until
    the closest pair is exactly ``separation`` apart.
    """
    if dim >= K:
        q, _ = np.linalg.qr(rng.standard_normal((dim, K)))
        return (q.T * (separation / math.sqrt(2.0))).copy()
    if dim == 2:
        angles = 2 * math.pi * np.arange(K) / K + rng.uniform(0, 2 * math.pi)
        pts = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    else:
        pts = rng.standard_normal((K, dim))
        pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff**2).sum(axis=-1))
    dmin = dist[~np.eye(K, dtype=bool)].min()
    if dmin <= 0:
        raise ValueError("degenerate center placement")
    return pts * (separation / dmin)


def gaussian_dataset(counts, spec: ClusterSpec, rng: np.random.Generator) -> Dataset:
    """Isotropic Gaussian samples around each class center; observed labels start clean."""
    counts = np.asarray(counts, dtype=np.int64)
    K, dim = spec.means.shape
    if counts.shape != (K,):
        raise ValueError("counts must have one entry per cluster center")
    labels = np.repeat(np.arange(K), counts)
    noise = rng.standard_normal((labels.size, dim)) * spec.stddev
    features = spec.means[labels] + noise
    return Dataset(features, labels, labels.copy(), K)


def dataset_stats(dataset: Dataset) -> dict:
    counts = dataset.class_counts
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0).tolist()
        raise ValueError(f"imbalance ratio undefined: empty observed class(es) {empty}")
    per_class = []
    for k in range(dataset.num_classes):
        sel = dataset.observed_labels == k
        per_class.append(float(np.mean(dataset.true_labels[sel] != k)))
    return {
        "realized_rho": float(counts.max() / counts.min()),
        "realized_gamma": float(np.mean(dataset.observed_labels != dataset.true_labels)),
        "per_class_noise": per_class,
        "realized_N": int(len(dataset)),
    }


def make_benchmark(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Long-tailed noisy training set plus a balanced clean test set from one geometry.

    The long tail is applied to the true labels first; the noise transition
    matrix is then built from those class counts and sampled.
    """
    rng_geo = substream(config.seed, "datagen.geometry")
    rng_train = substream(config.seed, "datagen.train")
    rng_noise = substream(config.seed, "datagen.noise")
    rng_test = substream(config.seed, "datagen.test")

    means = cluster_means(config.K, config.dim, config.separation, rng_geo)
    spec = ClusterSpec(means, config.stddev, config.separation)
    counts = longtail_counts(config.N, config.K, config.rho)
    clean = gaussian_dataset(counts, spec, rng_train)
    T = transition_matrix(counts, config.gamma)
    observed = corrupt_labels(clean.true_labels, T, rng_noise)
    train = clean.with_observed(observed)
    test = gaussian_dataset(np.full(config.K, config.n_test_per_class), spec, rng_test)
    return train, test
