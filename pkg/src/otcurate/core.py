"""Shared domain types, RNG contract and small numeric primitives."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class ConfigError(ValueError):
    """Raised when an ExperimentConfig field violates its valid range."""


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic PCG64 stream for ``seed``."""
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.Generator(np.random.PCG64(seed))


def substream(seed: int, name: str) -> np.random.Generator:
    """Named child stream of ``seed``.

    Stages draw from their own stream so that adding draws in one stage
    never shifts the randomness seen by another.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    key = int.from_bytes(digest[:8], "little")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(key,))
    return np.random.Generator(np.random.PCG64(ss))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite values")
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def check_prob_matrix(values, atol: float = 1e-6) -> np.ndarray:
    """Validate an N x K matrix of class probabilities and return it as float64."""
    p = np.asarray(values, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"probability matrix must be 2-D, got shape {p.shape}")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("probability entries must lie in [0, 1]")
    if not np.allclose(p.sum(axis=1), 1.0, atol=atol):
        raise ValueError("probability rows must sum to 1")
    return p


def unit_rows(x) -> np.ndarray:
    """L2-normalize rows; zero rows stay zero."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(norms > 0, norms, 1.0)


@dataclass
class Dataset:
    features: np.ndarray
    true_labels: np.ndarray
    observed_labels: np.ndarray
    num_classes: int
    class_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.observed_labels = np.asarray(self.observed_labels, dtype=np.int64)
        self.class_counts = np.bincount(self.observed_labels, minlength=self.num_classes)
        self.validate()

    def validate(self) -> None:
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be an N x d matrix")
        if self.true_labels.shape != (n,) or self.observed_labels.shape != (n,):
            raise ValueError("label arrays must have one entry per feature row")
        for name, labels in (("true_labels", self.true_labels), ("observed_labels", self.observed_labels)):
            if n and (labels.min() < 0 or labels.max() >= self.num_classes):
                raise ValueError(f"{name} must lie in [0, {self.num_classes})")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite values")
        if len(self.class_counts) != self.num_classes:
            raise ValueError("class_counts length must equal num_classes")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_clean(self) -> np.ndarray:
        return self.observed_labels == self.true_labels

    def with_observed(self, observed) -> "Dataset":
        return Dataset(self.features, self.true_labels, observed, self.num_classes)


# (name, predicate, human-readable range) for every constrained field
_RANGES = [
    ("K", lambda v: v >= 2, "K must be ≥ 2"),
    ("N", lambda v: v >= 1, "N must be ≥ 1"),
    ("dim", lambda v: v >= 1, "dim must be ≥ 1"),
    ("rho", lambda v: v >= 1, "rho must be ≥ 1"),
    ("gamma", lambda v: 0 <= v < 1, "gamma must be in [0, 1)"),
    ("lambda_ema", lambda v: 0 <= v <= 1, "lambda_ema must be in [0, 1]"),
    ("tau1", lambda v: 0 < v < 1, "tau1 must be in (0, 1)"),
    ("lambda_sw", lambda v: v >= 0, "lambda_sw must be ≥ 0"),
    ("lambda_c", lambda v: v >= 0, "lambda_c must be ≥ 0"),
    ("warmup_epochs", lambda v: v >= 1, "warmup_epochs must be ≥ 1"),
    ("ssl_rounds", lambda v: v >= 0, "ssl_rounds must be ≥ 0"),
    ("lr", lambda v: v >= 0, "lr must be ≥ 0"),
    ("seed", lambda v: v >= 0, "seed must be ≥ 0"),
    ("batch_size", lambda v: v >= 1, "batch_size must be ≥ 1"),
    ("separation", lambda v: v > 0, "separation must be > 0"),
    ("stddev", lambda v: v > 0, "stddev must be > 0"),
    ("n_test_per_class", lambda v: v >= 1, "n_test_per_class must be ≥ 1"),
    ("sinkhorn_eps", lambda v: v > 0, "sinkhorn_eps must be > 0"),
    ("sinkhorn_iters", lambda v: v >= 1, "sinkhorn_iters must be ≥ 1"),
    ("sinkhorn_tol", lambda v: v > 0, "sinkhorn_tol must be > 0"),
    ("temperature", lambda v: v > 0, "temperature must be > 0"),
    ("weak_sigma", lambda v: v >= 0, "weak_sigma must be ≥ 0"),
    ("strong_sigma", lambda v: v >= 0, "strong_sigma must be ≥ 0"),
    ("strong_mask_frac", lambda v: 0 <= v < 1, "strong_mask_frac must be in [0, 1)"),
    ("gmm_iters", lambda v: v >= 1, "gmm_iters must be ≥ 1"),
    ("gmm_tol", lambda v: v > 0, "gmm_tol must be > 0"),
    ("refresh_every", lambda v: v >= 1, "refresh_every must be ≥ 1"),
    ("baseline_threshold", lambda v: 0 < v < 1, "baseline_threshold must be in (0, 1)"),
]


@dataclass
class ExperimentConfig:
    """Every knob of one experiment; defaults are the desk-scale benchmark."""

    K: int = 10
    N: int = 2000
    dim: int = 16
    rho: float = 100.0
    gamma: float = 0.5
    lambda_ema: float = 0.99
    tau1: float = 0.7
    lambda_sw: float = 0.2
    lambda_c: float = 0.1
    warmup_epochs: int = 30
    ssl_rounds: int = 20
    lr: float = 0.1
    seed: int = 0
    batch_size: int = 64
    # synthetic feature model
    separation: float = 4.0
    stddev: float = 0.5
    n_test_per_class: int = 100
    # transport solver
    sinkhorn_eps: float = 0.05
    sinkhorn_iters: int = 1000
    sinkhorn_tol: float = 1e-6
    transport_prior: str = "uniform"
    # ssl views and losses
    temperature: float = 0.5
    weak_sigma: float = 0.02
    strong_sigma: float = 0.1
    strong_mask_frac: float = 0.2
    # selection
    gmm_iters: int = 200
    gmm_tol: float = 1e-8
    refresh_every: int = 1
    baseline_threshold: float = 0.5

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name, ok, msg in _RANGES:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}={value!r} is not numeric; {msg}")
            if not np.isfinite(value) or not ok(value):
                raise ConfigError(f"{name}={value!r} is invalid; {msg}")
        if self.transport_prior not in ("uniform", "clean", "seed"):
            raise ConfigError(
                f"transport_prior={self.transport_prior!r} is invalid; must be one of uniform, clean, seed"
            )
        if self.weak_sigma > self.strong_sigma:
            raise ConfigError(
                f"weak_sigma={self.weak_sigma!r} exceeds strong_sigma={self.strong_sigma!r}; "
                "weak_sigma must be ≤ strong_sigma"
            )
        if self.N < self.K:
            raise ConfigError(f"N={self.N!r} is invalid; N must be ≥ K ({self.K})")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        kwargs = {}
        for name, value in data.items():
            default = known[name].default
            # JSON has no int/float distinction worth trusting; coerce to the default's type
            if isinstance(default, int) and isinstance(value, float) and value.is_integer():
                value = int(value)
            elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            kwargs[name] = value
        return cls(**kwargs)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
