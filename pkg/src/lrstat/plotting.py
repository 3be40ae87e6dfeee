"""Report figures written next to the metrics CSVs (headless Agg backend)."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import Metrics  # noqa: E402

# fixed metadata so re-rendered PNGs are byte-identical
_PNG_META = {"Software": None}


def _finite(xs):
    return [x if x is not None and not (isinstance(x, float) and math.isnan(x)) else float("nan") for x in xs]


def plot_training_curves(runs: Mapping[str, Metrics], path: str | Path) -> Path:
    """Epoch-mean total loss and validation prec@1 for each named run."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for name, m in runs.items():
        epochs = [r.epoch for r in m.epochs]
        ax_loss.plot(epochs, _finite([r.loss_total for r in m.epochs]), label=name)
        ax_acc.plot(epochs, _finite([r.val_prec1 for r in m.epochs]), label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean training loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("validation prec@1")
    ax_acc.set_ylim(0, 1.02)
    for ax in (ax_loss, ax_acc):
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_terms(m: Metrics, path: str | Path, title: str = "") -> Path:
    """CE / SAT / TAT epoch means of one transfer run."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [r.epoch for r in m.epochs]
    for key in ("loss_ce", "loss_sat", "loss_tat"):
        ys = _finite([getattr(r, key) for r in m.epochs])
        if not all(math.isnan(y) for y in ys):
            ax.plot(epochs, ys, label=key[5:].upper())
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss term")
    ax.set_yscale("log")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_comparison(labels: Sequence[str], prec1: Sequence[float], prec5: Sequence[float], path: str | Path) -> Path:
    """Grouped bars of test prec@1 / prec@5 per model."""
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = range(len(labels))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], prec1, width, label="prec@1")
    ax.bar([x + width / 2 for x in xs], prec5, width, label="prec@5")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("test precision")
    ax.grid(axis="y", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_seed_scatter(baseline: Sequence[float], stat: Sequence[float], seeds: Sequence[int], path: str | Path) -> Path:
    """Per-seed test prec@1, baseline vs attention-transfer student."""
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(baseline, stat)
    for s, b, t in zip(seeds, baseline, stat):
        ax.annotate(str(s), (b, t), textcoords="offset points", xytext=(4, 4), fontsize=8)
    lo = min(list(baseline) + list(stat) + [1.0]) - 0.05
    ax.plot([lo, 1.0], [lo, 1.0], "k--", lw=0.8)
    ax.set_xlabel("baseline student prec@1")
    ax.set_ylabel("transfer student prec@1")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path
