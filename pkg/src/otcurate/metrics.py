"""Selection F1 by head/medium/tail group, pseudo-label quality, and ablation comparisons."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import Dataset, ExperimentConfig
from .ssl import MODEL, TRANSPORT, PipelineResult, Toggles, run_pipeline

GROUP_NAMES = ("head", "medium", "tail")


def class_groups(class_counts) -> list[np.ndarray]:
    """Split classes into thirds by count, largest first; ties go to the lower index.

    Group sizes use a ceiling split, e.g. 10 classes -> 4/3/3.
    """
    counts = np.asarray(class_counts)
    K = counts.size
    order = sorted(range(K), key=lambda k: (-counts[k], k))
    n_head = math.ceil(K / 3)
    n_med = math.ceil((K - n_head) / 2)
    return [
        np.array(sorted(order[:n_head]), dtype=np.int64),
        np.array(sorted(order[n_head:n_head + n_med]), dtype=np.int64),
        np.array(sorted(order[n_head + n_med:]), dtype=np.int64),
    ]


def prf(pred, truth) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


@dataclass
class GroupStats:
    name: str
    classes: list
    n: int
    precision: float | None
    recall: float | None
    f1: float | None


@dataclass
class GroupReport:
    groups: list
    overall: GroupStats

    def by_name(self, name: str) -> GroupStats:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {g.name: vars(g) for g in self.groups + [self.overall]}


def selection_f1(clean_mask, dataset: Dataset) -> GroupReport:
    """Precision/recall/F1 of ``clean_mask`` against truly clean samples, per observed-class group."""
    clean_mask = np.asarray(clean_mask, dtype=bool)
    truth = dataset.is_clean
    groups = []
    for name, classes in zip(GROUP_NAMES, class_groups(dataset.class_counts)):
        sel = np.isin(dataset.observed_labels, classes)
        if not sel.any():
            groups.append(GroupStats(name, classes.tolist(), 0, None, None, None))
            continue
        groups.append(GroupStats(name, classes.tolist(), int(sel.sum()), *prf(clean_mask[sel], truth[sel])))
    overall = GroupStats("all", list(range(dataset.num_classes)), len(dataset), *prf(clean_mask, truth))
    return GroupReport(groups, overall)


def pseudo_label_accuracy(labels, source, kept_mask, true_labels, class_counts) -> dict:
    """Accuracy of kept pseudo-labels, overall, per source tag, and per true-class group."""
    labels = np.asarray(labels)
    source = np.asarray(source)
    kept = np.asarray(kept_mask, dtype=bool)
    true_labels = np.asarray(true_labels)
    if not kept.any():
        raise ValueError("no kept pseudo-labels to score")
    ok = labels == true_labels

    def acc(sel):
        return float(ok[sel].mean()) if sel.any() else None

    per_group = {}
    for name, classes in zip(GROUP_NAMES, class_groups(class_counts)):
        per_group[name] = acc(kept & np.isin(true_labels, classes))
    return {
        "overall": acc(kept),
        "model": acc(kept & (source == MODEL)),
        "transport": acc(kept & (source == TRANSPORT)),
        "groups": per_group,
    }


def per_class_accuracy(pred, true_labels, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred)
    true_labels = np.asarray(true_labels)
    out = np.full(num_classes, np.nan)
    for k in range(num_classes):
        sel = true_labels == k
        if sel.any():
            out[k] = float(np.mean(pred[sel] == k))
    return out


VARIANTS = {
    "full": Toggles(),
    "wo_cdt": Toggles(cdt=False),
    "wo_lcs": Toggles(lcs=False),
    "wo_otp": Toggles(otp=False),
}


def variants_for(disabled) -> dict[str, Toggles]:
    """The full method plus one variant per component name in ``disabled``."""
    out = {"full": Toggles()}
    for name in disabled:
        key = f"wo_{name}"
        if key not in VARIANTS:
            raise ValueError(f"unknown ablation toggle {name!r}; expected cdt, lcs or otp")
        out[key] = VARIANTS[key]
    return out


def ablation_run(config: ExperimentConfig, train: Dataset, test: Dataset, disabled=("cdt", "lcs", "otp"),
                 warm=None) -> dict[str, PipelineResult]:
    """Run every variant with identical seed, data and warm-up model."""
    from .ssl import warmup_model

    trace = []
    if warm is None:
        warm, trace = warmup_model(config, train)
    out = {}
    for name, t in variants_for(disabled).items():
        out[name] = run_pipeline(config, train, test, t, initial_model=warm)
        out[name].warmup_trace = list(trace)
    return out
