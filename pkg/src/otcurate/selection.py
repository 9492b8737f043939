"""Loss-distance cross-selection of clean samples.

Pipeline for one refresh:

1. per-class mean max-probability thresholds, smoothed across refreshes by EMA
2. probability re-weighting with a per-class lower bound
3. seed-clean samples: weighted max above the class threshold and argmax equal
   to the observed label
4. class centroids of the seed-clean feature representations
5. a global two-component 1-D Gaussian mixture on each sample's squared
   distance to its observed-class centroid; the low-mean component's
   posterior is the clean probability, further gated by nearest centroid.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

VAR_FLOOR = 1e-6


@dataclass
class ThresholdState:
    tau: np.ndarray
    epoch: int = 0
    lambda_ema: float = 0.99
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.tau = np.asarray(self.tau, dtype=np.float64)
        if not self.history:
            self.history = [self.tau.tolist()]


@dataclass
class Centroids:
    values: np.ndarray
    support: np.ndarray
    # classes whose centroid came from the single-sample fallback
    fallback: np.ndarray | None = None

    @property
    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.values), axis=1)


@dataclass
class Gmm1D:
    means: np.ndarray
    variances: np.ndarray
    mixing: np.ndarray
    loglik_trace: list
    converged: bool
    degenerate: bool = False

    def posterior_low(self, values) -> np.ndarray:
        v = np.asarray(values, dtype=np.float64)
        if self.degenerate:
            return np.ones_like(v)
        logr = _component_logpdf(v, self.means, self.variances) + np.log(self.mixing)
        logr -= np.logaddexp(logr[:, 0], logr[:, 1])[:, None]
        return np.exp(logr[:, 0])


@dataclass
class CleanPartition:
    clean_mask: np.ndarray
    clean_prob: np.ndarray
    nearest: np.ndarray
    own_distance: np.ndarray


def class_thresholds(probs, observed_labels, num_classes: int) -> np.ndarray:
    """Mean max-probability per observed class; NaN marks a class with no samples."""
    probs = np.asarray(probs, dtype=np.float64)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    pmax = probs.max(axis=1)
    sums = np.bincount(observed_labels, weights=pmax, minlength=num_classes)
    counts = np.bincount(observed_labels, minlength=num_classes)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def fill_absent(raw) -> np.ndarray:
    """Replace absent (NaN) class thresholds by the mean of the present ones."""
    raw = np.asarray(raw, dtype=np.float64)
    present = np.isfinite(raw)
    if not present.any():
        raise ValueError("no class has any observed sample")
    return np.where(present, raw, raw[present].mean())


def init_thresholds(raw, lambda_ema: float) -> ThresholdState:
    return ThresholdState(fill_absent(raw), epoch=0, lambda_ema=lambda_ema)


def ema_update(state: ThresholdState, raw) -> ThresholdState:
    lam = state.lambda_ema
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda_ema must be in [0, 1], got {lam}")
    raw = np.asarray(raw, dtype=np.float64)
    raw = np.where(np.isfinite(raw), raw, state.tau)
    tau = lam * state.tau + (1.0 - lam) * raw
    return ThresholdState(tau, state.epoch + 1, lam, state.history + [tau.tolist()])


def class_mean_probs(probs, observed_labels, num_classes: int) -> np.ndarray:
    """K x K matrix; row k is the mean probability vector over samples observed as k.

    Classes without samples get a uniform row.
    """
    probs = np.asarray(probs, dtype=np.float64)
    out = np.full((num_classes, probs.shape[1]), 1.0 / probs.shape[1])
    for k in range(num_classes):
        sel = observed_labels == k
        if sel.any():
            out[k] = probs[sel].mean(axis=0)
    return out


def sample_weights(probs, observed_labels, class_means) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    k = np.asarray(observed_labels, dtype=np.int64)
    idx = np.arange(probs.shape[0])
    pmax = np.maximum(probs.max(axis=1), np.finfo(float).tiny)
    own = probs[idx, k] / pmax
    cm = np.asarray(class_means, dtype=np.float64)
    bound = cm[k, k] / np.maximum(cm[k].max(axis=1), np.finfo(float).tiny)
    return np.maximum(own, bound)


def weight_probs(probs, observed_labels, class_means) -> np.ndarray:
    """Scale each row by max(p_i[k] / max p_i, pbar_k[k] / max pbar_k), k the observed label."""
    w = sample_weights(probs, observed_labels, class_means)
    return np.asarray(probs, dtype=np.float64) * w[:, None]


def seed_clean_mask(weighted_probs, thresholds, observed_labels) -> np.ndarray:
    weighted_probs = np.asarray(weighted_probs)
    tau = thresholds.tau if isinstance(thresholds, ThresholdState) else np.asarray(thresholds)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    above = weighted_probs.max(axis=1) > tau[observed_labels]
    agree = np.argmax(weighted_probs, axis=1) == observed_labels
    return above & agree


def compute_centroids(features, mask, observed_labels, num_classes: int) -> Centroids:
    """Masked per-class mean of ``features``; classes with no selected sample are NaN."""
    features = np.asarray(features, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    values = np.full((num_classes, features.shape[1]), np.nan)
    support = np.zeros(num_classes, dtype=np.int64)
    for k in range(num_classes):
        sel = mask & (observed_labels == k)
        support[k] = int(sel.sum())
        if support[k]:
            values[k] = features[sel].mean(axis=0)
    return Centroids(values, support, np.zeros(num_classes, dtype=bool))


def fill_empty_centroids(centroids: Centroids, features, weighted_probs, observed_labels) -> Centroids:
    """Empty classes take the feature of their member with the largest weighted own-class probability."""
    features = np.asarray(features, dtype=np.float64)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    values = centroids.values.copy()
    fallback = np.zeros(len(values), dtype=bool)
    own = np.asarray(weighted_probs)[np.arange(len(observed_labels)), observed_labels]
    for k in np.flatnonzero(centroids.support == 0):
        members = np.flatnonzero(observed_labels == k)
        if members.size == 0:
            continue
        best = members[np.argmax(own[members])]
        values[k] = features[best]
        fallback[k] = True
    return Centroids(values, centroids.support.copy(), fallback)


def distances(features, centroids) -> np.ndarray:
    """N x K squared Euclidean distances; absent centroids give +inf."""
    c = centroids.values if isinstance(centroids, Centroids) else np.asarray(centroids, dtype=np.float64)
    f = np.asarray(features, dtype=np.float64)
    present = np.all(np.isfinite(c), axis=1)
    out = np.full((f.shape[0], c.shape[0]), np.inf)
    diff = f[:, None, :] - c[None, present, :]
    out[:, present] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _component_logpdf(v, means, variances) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)[:, None]
    return -0.5 * (np.log(2 * math.pi * variances) + (v - means) ** 2 / variances)


def _loglik(v, means, variances, mixing) -> float:
    lp = _component_logpdf(v, means, variances) + np.log(mixing)
    return float(np.logaddexp(lp[:, 0], lp[:, 1]).sum())


def fit_gmm1d(values, max_iters: int = 200, tol: float = 1e-8, var_floor: float = VAR_FLOOR) -> Gmm1D:
    """Two-component EM on scalar values, low-mean component reported first."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError("need at least two values to fit a two-component mixture")
    if not np.all(np.isfinite(v)):
        raise ValueError("values must be finite")
    spread = v.max() - v.min()
    if spread <= 1e-12 * max(1.0, abs(v.max())):
        m = float(v.mean())
        return Gmm1D(np.array([m, m]), np.array([var_floor, var_floor]), np.array([1.0, 0.0]),
                     [], True, degenerate=True)

    means = np.quantile(v, [0.25, 0.75])
    var0 = max(float(v.var()) / 4, var_floor)
    variances = np.array([var0, var0])
    mixing = np.array([0.5, 0.5])
    trace = [_loglik(v, means, variances, mixing)]
    converged = False
    for _ in range(max_iters):
        logr = _component_logpdf(v, means, variances) + np.log(mixing)
        logr -= np.logaddexp(logr[:, 0], logr[:, 1])[:, None]
        r = np.exp(logr)
        nk = r.sum(axis=0)
        if np.any(nk <= 0):
            break
        means = (r * v[:, None]).sum(axis=0) / nk
        variances = np.maximum((r * (v[:, None] - means) ** 2).sum(axis=0) / nk, var_floor)
        mixing = np.clip(nk / v.size, 1e-300, None)
        mixing = mixing / mixing.sum()
        trace.append(_loglik(v, means, variances, mixing))
        if abs(trace[-1] - trace[-2]) < tol:
            converged = True
            break
    order = np.argsort(means, kind="stable")
    return Gmm1D(means[order], variances[order], mixing[order], trace, converged)


def own_class_distances(dist, observed_labels) -> np.ndarray:
    return np.asarray(dist)[np.arange(len(observed_labels)), observed_labels]


def partition(features, centroids, observed_labels, gmm: Gmm1D) -> CleanPartition:
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    dist = distances(features, centroids)
    own = own_class_distances(dist, observed_labels)
    nearest = np.argmin(dist, axis=1)
    finite = np.isfinite(own)
    prob = np.zeros(own.shape)
    prob[finite] = gmm.posterior_low(own[finite])
    mask = (prob >= 0.5) & (nearest == observed_labels)
    return CleanPartition(mask, prob, nearest, own)


@dataclass
class SelectionResult:
    thresholds: ThresholdState
    weighted: np.ndarray
    seed_mask: np.ndarray
    centroids: Centroids
    gmm: Gmm1D | None
    partition: CleanPartition


def cross_select(
    probs,
    features_unit,
    observed_labels,
    num_classes: int,
    state: ThresholdState | None,
    lambda_ema: float = 0.99,
    gmm_iters: int = 200,
    gmm_tol: float = 1e-8,
    cdt: bool = True,
    lcs: bool = True,
) -> SelectionResult:
    """One selection refresh.

    ``state`` is None on the first refresh.  With ``cdt=False`` a single
    global mean-confidence threshold, frozen at the first refresh, replaces
    the per-class EMA thresholds.  With ``lcs=False`` the centroid/GMM stage
    is skipped and seed selection against a global EMA-grown threshold is the
    final partition.
    """
    probs = np.asarray(probs, dtype=np.float64)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    class_means = class_mean_probs(probs, observed_labels, num_classes)
    weighted = weight_probs(probs, observed_labels, class_means)

    if cdt and lcs:
        raw = class_thresholds(probs, observed_labels, num_classes)
        state = init_thresholds(raw, lambda_ema) if state is None else ema_update(state, raw)
    elif not cdt:
        if state is None:
            g = float(probs.max(axis=1).mean())
            state = ThresholdState(np.full(num_classes, g), 0, lambda_ema)
        else:
            state = ThresholdState(state.tau, state.epoch + 1, lambda_ema, state.history + [state.tau.tolist()])
    else:
        g = np.full(num_classes, float(probs.max(axis=1).mean()))
        state = ThresholdState(g, 0, lambda_ema) if state is None else ema_update(state, g)

    seed = seed_clean_mask(weighted, state, observed_labels)
    centroids = compute_centroids(features_unit, seed, observed_labels, num_classes)
    centroids = fill_empty_centroids(centroids, features_unit, weighted, observed_labels)

    if not lcs:
        dist = distances(features_unit, centroids)
        own = own_class_distances(dist, observed_labels)
        part = CleanPartition(seed.copy(), seed.astype(np.float64), np.argmin(dist, axis=1), own)
        return SelectionResult(state, weighted, seed, centroids, None, part)

    dist = distances(features_unit, centroids)
    own = own_class_distances(dist, observed_labels)
    gmm = fit_gmm1d(own[np.isfinite(own)], gmm_iters, gmm_tol)
    part = partition(features_unit, centroids, observed_labels, gmm)
    return SelectionResult(state, weighted, seed, centroids, gmm, part)


def small_loss_baseline(probs, observed_labels, threshold: float = 0.5) -> np.ndarray:
    """Class-agnostic small-loss rule: clean iff p(observed label) ≥ a fixed global threshold."""
    probs = np.asarray(probs, dtype=np.float64)
    observed_labels = np.asarray(observed_labels, dtype=np.int64)
    return probs[np.arange(len(observed_labels)), observed_labels] >= threshold
