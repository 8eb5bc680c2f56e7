"""Matplotlib figures written next to the CSV/SVG artifacts of a run."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .explain import ELECTRODE_XY, HEAD_CENTER, HEAD_RADIUS, ChannelImportance, edge_opacity  # noqa: E402
from .preprocess.segments import MontageConfig  # noqa: E402
from .training import History  # noqa: E402

# fixed metadata keeps PNG bytes stable across runs
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_history(histories: Sequence[tuple[str, History]], path) -> Path:
    """Training and validation loss curves (top) and learning rate (bottom)."""
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for name, h in histories:
        line, = ax1.plot(h.epoch, h.train_loss, lw=1, label=f"{name} train")
        ax1.plot(h.epoch, h.val_loss, lw=1, ls="--", color=line.get_color(), label=f"{name} val")
        ax2.plot(h.epoch, h.lr, lw=1, color=line.get_color())
    ax1.set_ylabel("weighted BCE")
    ax2.set_ylabel("learning rate")
    ax2.set_xlabel("epoch")
    if len(histories) <= 6:
        ax1.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def roc_points(y, scores) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    tpr = np.r_[0.0, np.cumsum(y)[ends] / max(y.sum(), 1)]
    fpr = np.r_[0.0, np.cumsum(~y)[ends] / max((~y).sum(), 1)]
    return fpr, tpr


def plot_roc(curves: Sequence[tuple[str, np.ndarray, np.ndarray]], path) -> Path:
    """One ROC curve per ``(name, labels, scores)``."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for name, y, s in curves:
        fpr, tpr = roc_points(y, s)
        ax.plot(fpr, tpr, lw=1, label=name)
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls=":")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    if len(curves) <= 10:
        ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    return _save(fig, path)


def plot_scalp(imp: ChannelImportance, path, montage: MontageConfig = MontageConfig()) -> Path:
    """Raster version of the scalp map, same geometry and opacity rule as the SVG."""
    fig, ax = plt.subplots(figsize=(4, 4))
    cx, cy = HEAD_CENTER
    ax.add_patch(plt.Circle((cx, cy), HEAD_RADIUS, fill=False, lw=2))
    ax.plot([cx - 18, cx, cx + 18], [cy - HEAD_RADIUS + 2, cy - HEAD_RADIUS - 22,
                                     cy - HEAD_RADIUS + 2], color="k", lw=2)
    for (a, b), v in zip(montage.eeg_pairs, imp.processed):
        (x1, y1), (x2, y2) = ELECTRODE_XY[a], ELECTRODE_XY[b]
        ax.plot([x1, x2], [y1, y2], color="k", lw=3, alpha=edge_opacity(v),
                solid_capstyle="round")
    for name in montage.electrodes:
        x, y = ELECTRODE_XY[name]
        ax.add_patch(plt.Circle((x, y), 11, facecolor="white", edgecolor="k", zorder=3))
        ax.text(x, y, name, ha="center", va="center", fontsize=7, zorder=4)
    ax.set_xlim(20, 380)
    ax.set_ylim(400, 20)  # SVG y axis points down
    ax.set_aspect("equal")
    ax.axis("off")
    if imp.subject_id:
        ax.set_title(imp.subject_id, fontsize=9)
    return _save(fig, path)
