"""Report figures: training curves, per-emotion accuracy and the ablation table.

Everything renders headless through the Agg backend and is written to PNG
next to the CSV that holds the same numbers.
"""
from __future__ import annotations

import io
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._fs import atomic_write_bytes  # noqa: E402
from .pipeline import EMOTIONS  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _save(fig, path) -> Path:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
    return Path(path)


def training_curves(records: Mapping[str, Sequence], path) -> Path:
    """Train and validation loss per emotion, one panel each.

    ``records`` maps emotion to a list of TrainRecord-like rows. The
    validation curve is omitted when it repeats the training curve.
    """
    names = [e for e in EMOTIONS if records.get(e)] or list(records)
    with plt.rc_context(STYLE):
        cols = min(3, max(1, len(names)))
        rows = int(np.ceil(max(1, len(names)) / cols))
        fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), squeeze=False, sharey=True)
        for ax, name in zip(axes.flat, names):
            rec = records[name]
            it = [r.iteration for r in rec]
            train = [r.train_loss for r in rec]
            val = [r.val_loss for r in rec]
            ax.plot(it, train, label="train", color="C0")
            if val != train:  # without a val split the trainer records train loss twice
                ax.plot(it, val, label="val", color="C1", linestyle="--")
            ax.set_title(name.capitalize())
            ax.set_xlabel("iteration")
        for ax in list(axes.flat)[len(names):]:
            ax.set_visible(False)
        axes[0, 0].set_ylabel("BCE loss")
        axes[0, 0].legend(loc="upper right")
        fig.tight_layout()
        return _save(fig, path)


def emotion_accuracy(report, path, title: str = "held-out accuracy") -> Path:
    """Bar per emotion with the unweighted mean drawn as a line."""
    acc = [100 * report.per_emotion[e] for e in EMOTIONS]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 2.8))
        x = np.arange(len(EMOTIONS))
        ax.bar(x, acc, color="C0", width=0.6)
        ax.axhline(100 * report.overall, color="C3", linewidth=1.2,
                   label=f"mean {100 * report.overall:.2f}%")
        ax.axhline(50, color="0.5", linewidth=0.8, linestyle=":", label="chance")
        ax.set_xticks(x, [e.capitalize() for e in EMOTIONS], rotation=30, ha="right")
        ax.set_ylim(0, 105)
        ax.set_ylabel("accuracy (%)")
        ax.set_title(title)
        ax.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def ablation_bars(results: Mapping[str, float], path) -> Path:
    """Horizontal bars of mean accuracy, one per pipeline, in the given order."""
    names = list(results)
    vals = [100 * results[n] for n in names]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 0.35 * len(names) + 1.0))
        y = np.arange(len(names))[::-1]
        ax.barh(y, vals, color=["C2" if "rnn" in n else "C0" for n in names], height=0.6)
        for yi, v in zip(y, vals):
            ax.text(v + 1, yi, f"{v:.1f}", va="center", fontsize=7)
        ax.axvline(50, color="0.5", linewidth=0.8, linestyle=":")
        ax.set_yticks(y, [n.upper() for n in names])
        ax.set_xlim(0, 110)
        ax.set_xlabel("mean per-emotion accuracy (%)")
        fig.tight_layout()
        return _save(fig, path)
