"""Figures: PR curves, object-density histograms, IoU-confidence maps, confidence traces."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .metrics import DensityBlock, QualityBlock, category_flags, precision_recall


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    _pyplot().close(fig)
    return path


def pr_curves(predictions: Mapping, ground_truth: Mapping, categories: Sequence[int], path, names=None) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for c in categories:
        scores, tp, n_gt = category_flags(predictions, ground_truth, c)
        if n_gt == 0:
            continue
        prec, rec = precision_recall(scores, tp, n_gt)
        label = (names or {}).get(c, f"category {c}")
        ax.step(np.r_[0.0, rec], np.r_[1.0, prec], where="post", label=label)
    ax.set(xlabel="recall", ylabel="precision", xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower left")
    return _save(fig, path)


def density_plot(blocks: Mapping[str, DensityBlock], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    width = 0.8 / max(len(blocks), 1)
    for i, (name, b) in enumerate(blocks.items()):
        frac = b.counts / max(b.counts.sum(), 1)
        ax.bar(np.arange(len(frac)) + i * width, frac, width=width, label=f"{name} (mean {b.mean:.2f})")
    ax.set(xlabel="objects per image", ylabel="fraction of images")
    ax.legend()
    return _save(fig, path)


def iou_confidence_map(block: QualityBlock, path, title: str = "") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4, 3.5))
    im = ax.imshow(block.histogram.T, origin="lower", extent=(0, 1, 0, 1), aspect="auto", cmap="viridis")
    fig.colorbar(im, ax=ax, label="pseudo boxes")
    ax.set(xlabel="max IoU with GT", ylabel="confidence",
           title=title or f"coverage (IoU>0.5) {block.coverage:.1%}")
    return _save(fig, path)


def confidence_traces(scores_per_round: Sequence[Sequence[float]], path, labels=None) -> Path:
    """Confidence distribution of pseudo boxes per round (median and 10-90% band)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    rounds = np.arange(len(scores_per_round))
    q = np.array([np.percentile(s, [10, 50, 90]) if len(s) else [np.nan] * 3 for s in scores_per_round])
    ax.fill_between(rounds, q[:, 0], q[:, 2], alpha=0.3)
    ax.plot(rounds, q[:, 1], marker="o")
    ax.set(xlabel="round", ylabel="pseudo-box confidence", ylim=(0, 1), xticks=rounds)
    if labels:
        ax.set_xticklabels(labels)
    return _save(fig, path)


def table_bars(wide_rows: Sequence[dict], path, metric_label: str = "mAP") -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(wide_rows)), 3.5))
    names = [r["arm"] for r in wide_rows]
    means = [r["mean"] for r in wide_rows]
    seeds = [[v for k, v in r.items() if k.startswith("seed_")] for r in wide_rows]
    ax.bar(names, means, color="#8aa")
    for i, vals in enumerate(seeds):
        ax.scatter([i] * len(vals), vals, color="k", s=10, zorder=3)
    ax.set(ylabel=metric_label)
    ax.tick_params(axis="x", rotation=30)
    return _save(fig, path)
