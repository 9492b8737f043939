"""Softmax-regression classifier trained with plain SGD."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import Dataset, log_softmax, softmax, unit_rows


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be K x d and bias length K")

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> "LinearModel":
        return cls(np.zeros((num_classes, dim)), np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "LinearModel":
        return LinearModel(self.weights.copy(), self.bias.copy())

    def logits(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected N x {self.dim} features, got shape {x.shape}")
        return x @ self.weights.T + self.bias

    def to_json(self) -> str:
        K, d = self.weights.shape
        return json.dumps(
            {
                "shape": [K, d],
                "weights": self.weights.ravel().tolist(),
                "bias": self.bias.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LinearModel":
        data = json.loads(text)
        K, d = data["shape"]
        return cls(np.asarray(data["weights"], dtype=np.float64).reshape(K, d), data["bias"])


@dataclass
class FeatureExtractor:
    """The representation used for centroids and transport costs."""

    mode: str = "normalized-identity"

    def __call__(self, features) -> np.ndarray:
        if self.mode == "identity":
            return np.asarray(features, dtype=np.float64)
        if self.mode == "normalized-identity":
            return unit_rows(features)
        raise ValueError(f"unknown feature mode {self.mode!r}")


def forward(model: LinearModel, features) -> np.ndarray:
    return softmax(model.logits(features), axis=1)


def ce_loss(model: LinearModel, features, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    logp = log_softmax(model.logits(features), axis=1)
    return float(-np.mean(logp[np.arange(labels.size), labels]))


def ce_grad(model: LinearModel, features, labels) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean cross-entropy with respect to (weights, bias)."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return np.zeros_like(model.weights), np.zeros_like(model.bias)
    p = forward(model, x)
    p[np.arange(labels.size), labels] -= 1.0
    p /= labels.size
    return p.T @ x, p.sum(axis=0)


def accuracy(model: LinearModel, features, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(model.logits(features), axis=1) == labels))


def sgd_step(model: LinearModel, grads, lr: float) -> None:
    gw, gb = grads
    model.weights -= lr * gw
    model.bias -= lr * gb


def train_warmup(
    model: LinearModel,
    dataset: Dataset,
    epochs: int,
    lr: float,
    rng: np.random.Generator,
    batch_size: int = 64,
    on_epoch=None,
) -> tuple[LinearModel, list[float]]:
    """Minibatch SGD on the observed labels.

    Returns a new model and the full-data loss after each epoch.  ``on_epoch``
    is called as ``on_epoch(epoch, model)`` after each epoch.
    """
    if epochs < 1:
        raise ValueError("epochs must be ≥ 1")
    model = model.copy()
    x, y = dataset.features, dataset.observed_labels
    n = len(dataset)
    trace = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                finite = np.all(np.isfinite(model.logits(x[idx])))
            if not finite:
                break
            sgd_step(model, ce_grad(model, x[idx], y[idx]), lr)
        with np.errstate(over="ignore", invalid="ignore"):
            finite = finite and np.all(np.isfinite(model.logits(x)))
        loss = ce_loss(model, x, y) if finite else float("inf")
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"warm-up loss became non-finite at epoch {epoch} (lr={lr}); "
                f"max |W|={np.max(np.abs(model.weights)):.3g}"
            )
        trace.append(loss)
        if on_epoch is not None:
            on_epoch(epoch, model)
    return model, trace
