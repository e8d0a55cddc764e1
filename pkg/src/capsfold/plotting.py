"""PNG figures rendered next to the CSV outputs."""

from __future__ import annotations

import io
from typing import Sequence

from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from ._io import atomic_write
from .training import EpochRecord

_STYLE = {"train": ("tab:blue", "-"), "val": ("tab:orange", "--")}


def _save(fig: Figure, path) -> None:
    FigureCanvasAgg(fig)
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight", metadata={"Software": None})
    atomic_write(path, buf.getvalue())


def plot_training_curves(records: Sequence[EpochRecord], path, title: str = "") -> None:
    """Accuracy and loss per epoch for the training and validation splits."""
    epochs = [r.epoch for r in records]
    fig = Figure(figsize=(9, 3.6))
    ax_acc, ax_loss = fig.subplots(1, 2)
    for split in ("train", "val"):
        color, ls = _STYLE[split]
        ax_acc.plot(epochs, [getattr(r, f"{split}_acc") for r in records], color=color, ls=ls,
                    marker="o", ms=3, label=split)
        ax_loss.plot(epochs, [getattr(r, f"{split}_loss") for r in records], color=color, ls=ls,
                     marker="o", ms=3, label=split)
    ax_acc.set(xlabel="epoch", ylabel="accuracy", ylim=(-0.02, 1.02))
    ax_loss.set(xlabel="epoch", ylabel="loss")
    for ax in (ax_acc, ax_loss):
        ax.grid(alpha=0.3)
        ax.legend(frameon=False)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_channel_scores(labels: Sequence[str], scores: Sequence[float], path, title: str = "") -> None:
    fig = Figure(figsize=(6, 3.2))
    ax = fig.subplots()
    ax.bar(range(len(scores)), scores, color="tab:green")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=35, ha="right")
    ax.set(ylabel="capsule length", ylim=(0, 1))
    ax.grid(axis="y", alpha=0.3)
    if title:
        ax.set_title(title)
    _save(fig, path)
