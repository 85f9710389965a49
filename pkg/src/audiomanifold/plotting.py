"""Figures written by the ``evaluate`` command.

Everything renders through the Agg backend so the CLI works headless. The
style dict is applied per figure with ``rc_context`` instead of being set
globally, so importing this module never changes a caller's matplotlib state.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "sans-serif",
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
    # a fixed date keeps PNG/PDF metadata out of the diff between runs
    "svg.hashsalt": "audiomanifold",
}

COLORS = ["#1b6ca8", "#d1495b", "#edae49", "#00798c", "#66a182", "#8d96a3"]


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_crr_curves(curves: dict, path) -> Path:
    """Crr against threshold, one line per method.

    Args:
        curves: method name -> (taus, crr values).
        path: output PNG.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        for i, (name, (taus, vals)) in enumerate(sorted(curves.items())):
            ax.plot(taus, vals, marker="o", ms=2.5, lw=1.2, color=COLORS[i % len(COLORS)], label=name)
        ax.set_xlabel("relative error threshold")
        ax.set_ylabel("Crr")
        ax.set_ylim(0, 1.02)
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_class_iou(per_method: dict, class_names: list, path) -> Path:
    """Grouped bars of per-class IoU.

    Args:
        per_method: method name -> {class_id: IoU or None}.
        class_names: display names indexed by class id.
    """
    methods = sorted(per_method)
    classes = sorted({c for m in methods for c in per_method[m]})
    width = 0.8 / max(len(methods), 1)
    x = np.arange(len(classes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(classes) + 1.5), 3.2))
        for i, m in enumerate(methods):
            vals = [per_method[m].get(c) or 0.0 for c in classes]
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, color=COLORS[i % len(COLORS)], label=m)
        labels = [class_names[c] if c < len(class_names) else str(c) for c in classes]
        ax.set_xticks(x, labels)
        ax.set_ylabel("IoU")
        ax.set_ylim(0, 1)
        ax.legend()
        return _save(fig, path)


def plot_examples(gts, preds, path, *, cmap="magma_r", n=4, vmin=None, vmax=None) -> Path:
    """Ground truth (top row) against prediction (bottom row) for the first ``n`` samples."""
    n = min(n, len(gts))
    with plt.rc_context({**STYLE, "axes.grid": False}):
        fig, axes = plt.subplots(2, n, figsize=(1.6 * n, 3.4), squeeze=False)
        for i in range(n):
            for row, img in enumerate((gts[i], preds[i])):
                ax = axes[row, i]
                ax.imshow(img, cmap=cmap, vmin=vmin, vmax=vmax, interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
        axes[0, 0].set_ylabel("target")
        axes[1, 0].set_ylabel("predicted")
        return _save(fig, path)
