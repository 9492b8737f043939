"""Report figures written next to the CSV/JSON outputs.

Uses the object-oriented matplotlib API with an Agg canvas so nothing touches
pyplot's global state or needs a display.
"""
from __future__ import annotations

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

GROUPS = ("head", "medium", "tail")


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path, dpi=120)


def group_f1_bars(reports: dict, path, title: str = "Selection F1 by class group") -> None:
    """Grouped bars; ``reports`` maps a method name to {group: f1 or None}."""
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    names = list(reports)
    width = 0.8 / max(len(names), 1)
    x = np.arange(len(GROUPS))
    for i, name in enumerate(names):
        vals = [reports[name].get(g) for g in GROUPS]
        ax.bar(x + i * width, [np.nan if v is None else v for v in vals], width, label=name)
    ax.set_xticks(x + width * (len(names) - 1) / 2, GROUPS)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.set_title(title)
    ax.legend(frameon=False, fontsize=8)
    _save(fig, path)


def loss_curve(trace, path, title: str = "Warm-up loss") -> None:
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    ax.plot(np.arange(1, len(trace) + 1), trace, marker="o", ms=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("cross-entropy")
    ax.set_title(title)
    _save(fig, path)


def round_traces(rounds, path) -> None:
    """Losses on the left axis, accuracies on the right, one point per SSL round."""
    fig = Figure(figsize=(8, 3.2))
    left, right = fig.add_subplot(1, 2, 1), fig.add_subplot(1, 2, 2)
    r = [m.round for m in rounds]
    for key in ("l_total", "l_ssl", "l_sw", "l_con"):
        left.plot(r, [getattr(m, key) for m in rounds], label=key)
    left.set_xlabel("round")
    left.set_title("losses")
    left.legend(frameon=False, fontsize=8)
    for key in ("test_acc", "pseudo_acc", "transport_acc", "model_acc_on_transport"):
        right.plot(r, [getattr(m, key) for m in rounds], label=key)
    right.set_xlabel("round")
    right.set_ylim(0, 1.02)
    right.set_title("accuracy")
    right.legend(frameon=False, fontsize=8)
    _save(fig, path)


def ablation_bars(summary: dict, path) -> None:
    """``summary`` maps variant name to a list of final test accuracies (one per seed)."""
    fig = Figure(figsize=(5, 3.2))
    ax = fig.add_subplot()
    names = list(summary)
    means = [float(np.mean(summary[n])) for n in names]
    errs = [float(np.std(summary[n])) for n in names]
    ax.bar(names, means, yerr=errs, capsize=3, color="0.6")
    ax.set_ylabel("final test accuracy")
    lo = min(means) - max(errs + [0.0]) - 0.05
    ax.set_ylim(max(0.0, lo), 1.0)
    _save(fig, path)
