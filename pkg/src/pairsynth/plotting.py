"""Figures for the CLI: sample grids, mask overlays, loss curves and metric comparisons."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from .data import tensor_to_image  # noqa: E402

# Fixed palette: class 0 is black, the rest cycle through a stable colour list.
PALETTE = np.array([
    (0, 0, 0), (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230), (210, 245, 60),
    (250, 190, 212), (0, 128, 128), (220, 190, 255), (170, 110, 40), (255, 250, 200),
    (128, 0, 0), (170, 255, 195), (128, 128, 0), (255, 215, 180), (0, 0, 128),
], dtype=np.uint8)

plt.rcParams.update({
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "pairsynth",
})


def colourize(mask) -> np.ndarray:
    """(H, W) label map -> (H, W, 3) uint8 using :data:`PALETTE`."""
    labels = np.asarray(mask.cpu() if isinstance(mask, torch.Tensor) else mask).astype(np.int64)
    return PALETTE[labels % len(PALETTE)]


def overlay(image: torch.Tensor, mask, alpha: float = 0.5) -> np.ndarray:
    """Blend the palette colours of ``mask`` over a (3, H, W) image in [-1, 1]."""
    rgb = tensor_to_image(image).astype(np.float32)
    col = colourize(mask).astype(np.float32)
    labels = np.asarray(mask.cpu() if isinstance(mask, torch.Tensor) else mask)
    a = np.where(labels[..., None] > 0, alpha, 0.0)
    return (rgb * (1 - a) + col * a).round().astype(np.uint8)


def tile(arrays: list[np.ndarray], columns: int, pad: int = 2) -> np.ndarray:
    """Arrange equally sized (H, W, 3) uint8 arrays on a white grid."""
    h, w = arrays[0].shape[:2]
    rows = -(-len(arrays) // columns)
    canvas = np.full((rows * (h + pad) + pad, columns * (w + pad) + pad, 3), 255, np.uint8)
    for k, arr in enumerate(arrays):
        r, c = divmod(k, columns)
        y, x = pad + r * (h + pad), pad + c * (w + pad)
        canvas[y:y + h, x:x + w] = arr
    return canvas


def sample_grid(images: torch.Tensor, columns: int = 4) -> np.ndarray:
    return tile([tensor_to_image(im) for im in images], columns)


def overlay_grid(images: torch.Tensor, masks: torch.Tensor, columns: int = 4) -> np.ndarray:
    return tile([overlay(im, m) for im, m in zip(images, masks)], columns)


def plot_losses(reports, path: str | Path) -> Path:
    """Discriminator and generator totals per epoch."""
    epochs = [r.epoch for r in reports]
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.plot(epochs, [r.d_total for r in reports], lw=0.8, label="D total")
    ax.plot(epochs, [r.g_total for r in reports], lw=0.8, label="G total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_metric_bars(summaries: dict[str, dict[str, float]], metrics: list[str], path: str | Path) -> Path:
    """One panel per metric, one bar per run."""
    names = list(summaries)
    fig, axes = plt.subplots(1, len(metrics), figsize=(2.6 * len(metrics), 3.0), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        values = [summaries[n].get(metric, np.nan) for n in names]
        ax.bar(range(len(names)), values, color="0.4")
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right")
        ax.set_title(metric)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
