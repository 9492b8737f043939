"""Semi-supervised denoising: views, mixed model/transport pseudo-labels, and the round loop."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import transport
from .classifier import (
    FeatureExtractor,
    LinearModel,
    accuracy,
    ce_grad,
    ce_loss,
    forward,
    sgd_step,
    train_warmup,
)
from .core import Dataset, ExperimentConfig, log_softmax, substream, unit_rows
from .selection import SelectionResult, cross_select

log = logging.getLogger(__name__)

MODEL, TRANSPORT = 0, 1


@dataclass
class ViewPair:
    weak: np.ndarray
    strong: np.ndarray


@dataclass
class PseudoLabelSet:
    labels: np.ndarray
    source: np.ndarray
    kept_mask: np.ndarray


@dataclass
class LossBreakdown:
    l_ssl: float
    l_sw: float
    l_con: float
    l_total: float
    lambda_sw: float
    lambda_c: float


@dataclass
class Toggles:
    cdt: bool = True
    lcs: bool = True
    otp: bool = True

    @property
    def name(self) -> str:
        off = [k for k in ("cdt", "lcs", "otp") if not getattr(self, k)]
        return "full" if not off else "wo_" + "_".join(off)


class StageError(RuntimeError):
    def __init__(self, stage: str, round_index: int, cause: Exception):
        super().__init__(f"stage {stage!r} failed in round {round_index}: {cause}")
        self.stage = stage
        self.round_index = round_index


def make_views(features, rng, weak_sigma: float, strong_sigma: float, strong_mask_frac: float) -> ViewPair:
    """Feature-space weak/strong augmentation of unit-norm rows.

    Weak adds Gaussian jitter; strong adds larger jitter and zeroes a random
    fraction of coordinates.  Both views are re-normalized to unit L2.
    """
    if not 0 <= weak_sigma <= strong_sigma:
        raise ValueError("need 0 ≤ weak_sigma ≤ strong_sigma")
    if not 0 <= strong_mask_frac < 1:
        raise ValueError("strong_mask_frac must be in [0, 1)")
    x = np.asarray(features, dtype=np.float64)
    weak = x + weak_sigma * rng.standard_normal(x.shape)
    strong = x + strong_sigma * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= strong_mask_frac
    strong = strong * keep
    # a fully masked row falls back to its unmasked jittered copy
    dead = ~keep.any(axis=1)
    if dead.any():
        strong[dead] = x[dead] + strong_sigma * rng.standard_normal((int(dead.sum()), x.shape[1]))
    return ViewPair(unit_rows(weak), unit_rows(strong))


def assign_pseudo_labels(probs_weak, ot_labels, tau1: float, use_transport: bool = True) -> PseudoLabelSet:
    """Model argmax where its max probability reaches tau1, transport label otherwise.

    With ``use_transport=False`` sub-threshold samples are dropped instead.
    Transport labels of -1 (empty plan column) are dropped as well.
    """
    if not 0 < tau1 < 1:
        raise ValueError(f"tau1 must be in (0, 1), got {tau1}")
    probs_weak = np.asarray(probs_weak, dtype=np.float64)
    ot_labels = np.asarray(ot_labels, dtype=np.int64)
    confident = probs_weak.max(axis=1) >= tau1
    labels = np.where(confident, np.argmax(probs_weak, axis=1), ot_labels)
    source = np.where(confident, MODEL, TRANSPORT)
    kept = confident | ((ot_labels >= 0) & use_transport)
    return PseudoLabelSet(labels.astype(np.int64), source, kept)


def contrastive_loss(z_weak, z_strong, temperature: float = 0.5) -> float:
    """Symmetric InfoNCE (NT-Xent) over the 2M views of an in-batch set.

    Each view's positive is the other view of the same sample; every other
    view in the batch is a negative.
    """
    zw = np.asarray(z_weak, dtype=np.float64)
    zs = np.asarray(z_strong, dtype=np.float64)
    m = zw.shape[0]
    if m < 2:
        log.warning("contrastive loss needs at least two samples; returning 0")
        return 0.0
    z = np.concatenate([zw, zs], axis=0)
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    logp = log_softmax(sim, axis=1)
    pos = np.concatenate([np.arange(m, 2 * m), np.arange(m)])
    return float(-np.mean(logp[np.arange(2 * m), pos]))


def ssl_loss(model: LinearModel, x_labeled, y_labeled, x_pseudo, y_pseudo) -> float:
    return ce_loss(model, x_labeled, y_labeled) + ce_loss(model, x_pseudo, y_pseudo)


def ssl_grad(model: LinearModel, x_labeled, y_labeled, x_pseudo, y_pseudo):
    gl = ce_grad(model, x_labeled, y_labeled)
    gu = ce_grad(model, x_pseudo, y_pseudo)
    return gl[0] + gu[0], gl[1] + gu[1]


def total_loss(l_ssl: float, l_sw: float, l_con: float, lambda_sw: float = 0.2, lambda_c: float = 0.1) -> LossBreakdown:
    parts = {"l_ssl": l_ssl, "l_sw": l_sw, "l_con": l_con}
    bad = [k for k, v in parts.items() if not math.isfinite(v)]
    if bad:
        raise FloatingPointError(f"non-finite loss component(s) {bad}: {parts}")
    total = l_ssl + lambda_sw * l_sw + lambda_c * l_con
    return LossBreakdown(l_ssl, l_sw, l_con, total, lambda_sw, lambda_c)


@dataclass
class BatchInputs:
    """Everything one SSL step needs, with the transport plan already frozen."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_pseudo: np.ndarray
    y_pseudo: np.ndarray
    plan: np.ndarray
    cost_strong: np.ndarray
    z_weak: np.ndarray
    z_strong: np.ndarray


def batch_objective(model: LinearModel, b: BatchInputs, lambda_sw: float, lambda_c: float, temperature: float) -> LossBreakdown:
    l_ssl = ssl_loss(model, b.x_labeled, b.y_labeled, b.x_pseudo, b.y_pseudo)
    l_sw = transport.consistency_loss(b.plan, b.cost_strong)
    l_con = contrastive_loss(b.z_weak, b.z_strong, temperature)
    return total_loss(l_ssl, l_sw, l_con, lambda_sw, lambda_c)


def batch_gradient(model: LinearModel, b: BatchInputs):
    """Gradient of the batch total loss in the classifier parameters.

    The plan is a constant, and the cost and contrastive terms are built on the
    fixed normalized input representation, so only the cross-entropy terms
    depend on the parameters.
    """
    return ssl_grad(model, b.x_labeled, b.y_labeled, b.x_pseudo, b.y_pseudo)


@dataclass
class RoundMetrics:
    round: int
    l_ssl: float
    l_sw: float
    l_con: float
    l_total: float
    pseudo_acc: float
    n_labeled: int
    n_unlabeled: int
    n_model: int
    n_transport: int
    n_dropped: int
    transport_acc: float
    model_acc_on_transport: float
    test_acc: float

    CSV_FIELDS = (
        "round", "l_ssl", "l_sw", "l_con", "l_total", "pseudo_acc", "n_labeled", "n_unlabeled",
        "n_model", "n_transport", "n_dropped", "transport_acc", "model_acc_on_transport", "test_acc",
    )

    def row(self) -> list:
        return [getattr(self, k) for k in self.CSV_FIELDS]


@dataclass
class PipelineResult:
    model: LinearModel
    warmup_model: LinearModel
    warmup_trace: list
    warmup_test_acc: float
    rounds: list = field(default_factory=list)
    selections: list = field(default_factory=list)
    toggles: Toggles = field(default_factory=Toggles)

    @property
    def final_test_acc(self) -> float:
        return self.rounds[-1].test_acc if self.rounds else self.warmup_test_acc


def warmup_model(config: ExperimentConfig, train: Dataset) -> tuple[LinearModel, list]:
    model = LinearModel.zeros(train.num_classes, train.dim)
    return train_warmup(model, train, config.warmup_epochs, config.lr,
                        substream(config.seed, "warmup"), config.batch_size)


def refresh_selection(model, config, train: Dataset, state, toggles: Toggles) -> SelectionResult:
    f = FeatureExtractor()(train.features)
    probs = forward(model, train.features)
    return cross_select(probs, f, train.observed_labels, train.num_classes, state,
                        config.lambda_ema, config.gmm_iters, config.gmm_tol,
                        cdt=toggles.cdt, lcs=toggles.lcs)


def source_mass(config: ExperimentConfig, sel: SelectionResult, cls_ids) -> np.ndarray:
    """Class-side marginal of the transport plan over the present centroids."""
    if config.transport_prior == "uniform":
        return transport.uniform(len(cls_ids))
    counts = sel.centroids.support[cls_ids].astype(np.float64)
    if config.transport_prior == "clean":
        # every clean sample carries equal mass; at least one per present class
        counts = np.bincount(sel.partition.nearest[sel.partition.clean_mask],
                             minlength=len(sel.centroids.support))[cls_ids].astype(np.float64)
    counts = np.maximum(counts, 1.0)
    return counts / counts.sum()


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def run_pipeline(
    config: ExperimentConfig,
    train: Dataset,
    test: Dataset,
    toggles: Toggles | None = None,
    initial_model: LinearModel | None = None,
    dump_dir: str | None = None,
) -> PipelineResult:
    """Warm-up, then ``ssl_rounds`` rounds of selection refresh and SSL epochs.

    Each round refreshes the clean/noisy partition (every ``refresh_every``
    rounds), then makes one pass over the unlabeled (noisy) set in batches of
    ``batch_size``, pairing each with an equally-sized labeled batch.
    """
    toggles = toggles or Toggles()
    if initial_model is None:
        try:
            warm, trace = warmup_model(config, train)
        except Exception as exc:
            raise StageError("warmup", 0, exc) from exc
    else:
        warm, trace = initial_model.copy(), []
    result = PipelineResult(warm.copy(), warm.copy(), trace, accuracy(warm, test.features, test.true_labels),
                            toggles=toggles)
    if config.ssl_rounds == 0:
        return result

    model = warm.copy()
    rng = substream(config.seed, "ssl")
    extractor = FeatureExtractor()
    f_train = extractor(train.features)
    norms = np.linalg.norm(train.features, axis=1)
    state = None
    sel = None
    if dump_dir:
        os.makedirs(dump_dir, exist_ok=True)

    for r in range(config.ssl_rounds):
        stage = "select"
        try:
            if sel is None or r % config.refresh_every == 0:
                sel = refresh_selection(model, config, train, state, toggles)
                state = sel.thresholds
                result.selections.append(sel)
            clean = sel.partition.clean_mask
            lab_idx = np.flatnonzero(clean)
            unl_idx = np.flatnonzero(~clean)
            present = sel.centroids.present
            cls_ids = np.flatnonzero(present)
            centroids = sel.centroids.values[present]

            stage = "ssl"
            lab_order = rng.permutation(lab_idx)
            unl_order = rng.permutation(unl_idx)
            bs = config.batch_size
            n_batches = max(1, math.ceil(len(unl_order) / bs), math.ceil(len(lab_order) / bs))
            losses = []
            pl_correct, src_all, kept_all = [], [], []
            t_correct, m_correct = [], []
            for bi in range(n_batches):
                lb = lab_order[(bi * bs) % max(len(lab_order), 1):][:bs] if len(lab_order) else lab_order
                ub = unl_order[bi * bs:(bi + 1) * bs]
                if len(ub) == 0 and len(unl_order):
                    ub = unl_order[(bi * bs) % len(unl_order):][:bs]

                if len(ub):
                    views = make_views(f_train[ub], rng, config.weak_sigma, config.strong_sigma,
                                       config.strong_mask_frac)
                    # the classifier reads raw-scale inputs: restore each row's norm
                    x_weak = views.weak * norms[ub, None]
                    probs_weak = forward(model, x_weak)
                    Cw = transport.cost_matrix(centroids, views.weak)
                    stage = "transport"
                    plan = transport.sinkhorn(Cw, source_mass(config, sel, cls_ids), transport.uniform(len(ub)),
                                              config.sinkhorn_eps, config.sinkhorn_iters, config.sinkhorn_tol)
                    if dump_dir:
                        transport.dump_plan(plan, os.path.join(dump_dir, f"plan_r{r:03d}_b{bi:03d}.json"),
                                            round=r, batch=bi, classes=cls_ids.tolist())
                    ot_local, _ = transport.plan_to_labels(plan)
                    ot_labels = np.where(ot_local >= 0, cls_ids[np.maximum(ot_local, 0)], -1)
                    stage = "ssl"
                    pseudo = assign_pseudo_labels(probs_weak, ot_labels, config.tau1, toggles.otp)
                    Cs = transport.cost_matrix(centroids, views.strong)
                    kept = pseudo.kept_mask
                    truth = train.true_labels[ub]
                    pl_correct.append(pseudo.labels[kept] == truth[kept])
                    src_all.append(pseudo.source)
                    kept_all.append(kept)
                    sub = pseudo.source == TRANSPORT
                    t_ok = sub & (ot_labels >= 0)
                    t_correct.append(ot_labels[t_ok] == truth[t_ok])
                    m_correct.append(np.argmax(probs_weak[t_ok], axis=1) == truth[t_ok])
                    batch = BatchInputs(train.features[lb], train.observed_labels[lb],
                                        x_weak[kept], pseudo.labels[kept], plan.values, Cs,
                                        views.weak, views.strong)
                else:
                    empty = np.zeros((0, train.dim))
                    batch = BatchInputs(train.features[lb], train.observed_labels[lb], empty,
                                        np.zeros(0, dtype=np.int64), np.zeros((1, 1)), np.zeros((1, 1)),
                                        empty, empty)
                parts = batch_objective(model, batch, config.lambda_sw, config.lambda_c, config.temperature)
                losses.append(parts)
                sgd_step(model, batch_gradient(model, batch), config.lr)
                if not (np.all(np.isfinite(model.weights)) and np.all(np.isfinite(model.bias))):
                    raise FloatingPointError("parameters became non-finite")
        except StageError:
            raise
        except Exception as exc:
            raise StageError(stage, r, exc) from exc

        src = np.concatenate(src_all) if src_all else np.zeros(0, dtype=np.int64)
        kept = np.concatenate(kept_all) if kept_all else np.zeros(0, dtype=bool)
        result.rounds.append(RoundMetrics(
            round=r,
            l_ssl=_mean([p.l_ssl for p in losses]),
            l_sw=_mean([p.l_sw for p in losses]),
            l_con=_mean([p.l_con for p in losses]),
            l_total=_mean([p.l_total for p in losses]),
            pseudo_acc=_mean(np.concatenate(pl_correct)) if pl_correct else float("nan"),
            n_labeled=int(len(lab_idx)),
            n_unlabeled=int(len(unl_idx)),
            n_model=int(np.sum(kept & (src == MODEL))),
            n_transport=int(np.sum(kept & (src == TRANSPORT))),
            n_dropped=int(np.sum(~kept)),
            transport_acc=_mean(np.concatenate(t_correct)) if t_correct else float("nan"),
            model_acc_on_transport=_mean(np.concatenate(m_correct)) if m_correct else float("nan"),
            test_acc=accuracy(model, test.features, test.true_labels),
        ))
    result.model = model
    return result
