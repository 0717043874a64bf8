"""Matplotlib figures written next to the delimited reports."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_SAVE = dict(dpi=100, metadata={"Software": None})


def plot_cost(report, path, title: str = "") -> None:
    entries = [e for e in report.entries if e.macs > 0]
    names = [e.name for e in entries]
    gmacs = [e.macs / 1e9 for e in entries]
    colors = ["tab:blue" if e.headline else "tab:gray" for e in entries]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.barh(names, gmacs, color=colors)
    ax.invert_yaxis()
    ax.set_xlabel("GMACs per view (grey: excluded from headline)")
    ax.set_title(title or f"{report.gflops_per_view:.1f} GFLOPs/view, {report.total_params / 1e6:.1f}M params")
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_training(metrics, path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(9, 3.5))
    for split, style in (("train", "-"), ("val", "--")):
        rows = [m for m in metrics if m.split == split]
        epochs = [m.epoch for m in rows]
        ax_loss.plot(epochs, [m.loss for m in rows], style, label=split)
        ax_acc.plot(epochs, [m.top1 for m in rows], style, label=split)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("cross-entropy")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("top-1")
    ax_acc.set_ylim(0, 1.02)
    ax_loss.legend()
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_attention(clip: np.ndarray, heat: np.ndarray, path) -> None:
    """Frames on the top row, class-token attention heatmaps below."""
    T = len(heat)
    fig, axes = plt.subplots(2, T, figsize=(1.4 * T, 3), squeeze=False)
    for t in range(T):
        axes[0, t].imshow(np.clip(clip[t], 0, 1), interpolation="nearest")
        axes[1, t].imshow(heat[t], cmap="inferno", vmin=0, vmax=1, interpolation="nearest")
        axes[0, t].set_title(f"t={t}", fontsize=8)
        for ax in axes[:, t]:
            ax.set_xticks([])
            ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
