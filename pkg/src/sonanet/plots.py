"""Matplotlib figures written next to the text reports (Agg backend only)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def cmc_curve(cmc: np.ndarray, path, title: str = "CMC", map_value: float | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ranks = np.arange(1, len(cmc) + 1)
    ax.plot(ranks, cmc, marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("match rate")
    ax.set_ylim(0.0, 1.02)
    ax.set_xticks(ranks)
    ax.grid(alpha=0.3)
    ax.set_title(title if map_value is None else f"{title} (mAP {map_value:.3f})")
    return _save(fig, path)


def loss_curves(epoch_log: list[dict], path, terms=("total", "triplet_global", "ce_global", "triplet_local", "ce_local")) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    epochs = [r["epoch"] for r in epoch_log]
    for t in terms:
        ax.plot(epochs, [r[t] for r in epoch_log], label=t)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    return _save(fig, path)


def heatmap(attn: np.ndarray, ref: tuple[int, int], path, image: np.ndarray | None = None) -> Path:
    """Attention map with the reference point marked; the input image (3 x H x
    W in [0, 1]) is shown alongside when given."""
    cols = 2 if image is not None else 1
    fig, axes = plt.subplots(1, cols, figsize=(2.6 * cols, 4.0), squeeze=False)
    ax = axes[0, -1]
    im = ax.imshow(attn, cmap="viridis", interpolation="nearest")
    ax.plot(ref[1], ref[0], marker="x", color="red", markersize=8)
    ax.set_title("attention")
    fig.colorbar(im, ax=ax, fraction=0.046)
    if image is not None:
        axes[0, 0].imshow(np.clip(image.transpose(1, 2, 0), 0, 1))
        h, w = attn.shape
        sy, sx = image.shape[1] / h, image.shape[2] / w
        axes[0, 0].plot((ref[1] + 0.5) * sx - 0.5, (ref[0] + 0.5) * sy - 0.5, marker="x", color="red", markersize=8)
        axes[0, 0].set_title("input")
    for a in axes.ravel():
        a.set_xticks([])
        a.set_yticks([])
    return _save(fig, path)


def bench_bars(with_ms: float, with_std: float, without_ms: float, without_std: float, path) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.2))
    ax.bar(["without SONA", "with SONA"], [without_ms, with_ms], yerr=[without_std, with_std], capsize=4,
           color=["#888888", "#3b75af"])
    ax.set_ylabel("ms per image")
    overhead = 100.0 * (with_ms - without_ms) / without_ms
    ax.set_title(f"overhead {overhead:.1f}%")
    return _save(fig, path)
