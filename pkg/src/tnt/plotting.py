"""Matplotlib renderings of exports and training logs, written to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

rc_params = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "image.cmap": "viridis",
}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)


def attention_heatmap(matrix: np.ndarray, path, title: str = "", query: int | None = None) -> None:
    with plt.rc_context(rc_params):
        fig, ax = plt.subplots(figsize=(4, 3.6))
        im = ax.imshow(matrix, vmin=0.0)
        ax.xaxis.set_major_locator(MaxNLocator(integer=True))
        ax.yaxis.set_major_locator(MaxNLocator(integer=True))
        ax.set_xlabel("key")
        ax.set_ylabel("query")
        if query is not None:
            ax.axhline(query, color="r", lw=0.8)
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, path)


def grid_map(values: np.ndarray, path, title: str = "") -> None:
    """A single 2-D field, e.g. class-token attention on the patch grid."""
    with plt.rc_context(rc_params):
        fig, ax = plt.subplots(figsize=(4, 3.6))
        im = ax.imshow(values)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title)
        fig.colorbar(im, ax=ax, fraction=0.046)
        _save(fig, path)


def word_feature_mosaic(maps: np.ndarray, grid: tuple[int, int], path, title: str = "") -> None:
    """Tile the (n, k, k) per-patch maps back onto the patch grid."""
    gh, gw = grid
    k = maps.shape[-1]
    mosaic = maps.reshape(gh, gw, k, k).transpose(0, 2, 1, 3).reshape(gh * k, gw * k)
    with plt.rc_context(rc_params):
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(mosaic, cmap="magma")
        for i in range(1, gh):
            ax.axhline(i * k - 0.5, color="w", lw=0.3)
        for j in range(1, gw):
            ax.axvline(j * k - 0.5, color="w", lw=0.3)
        ax.set_xticks([])
        ax.set_yticks([])
        ax.set_title(title)
        _save(fig, path)


def training_curves(log: list[dict], path, title: str = "") -> None:
    steps = np.array([r["step"] for r in log])
    loss = np.array([r["loss"] for r in log])
    acc = np.array([r["acc"] for r in log])
    lr = np.array([r["lr"] for r in log])
    win = max(1, len(log) // 50)
    kernel = np.ones(win) / win
    with plt.rc_context(rc_params):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        axes[0].plot(steps, loss, lw=0.4, alpha=0.4)
        axes[0].plot(steps[win - 1 :], np.convolve(loss, kernel, "valid"), lw=1.2)
        axes[0].set_ylabel("loss")
        axes[1].plot(steps[win - 1 :], np.convolve(acc, kernel, "valid"), lw=1.2)
        axes[1].set_ylabel("batch accuracy")
        axes[1].set_ylim(0, 1.02)
        axes[2].plot(steps, lr, lw=1.2)
        axes[2].set_ylabel("learning rate")
        for ax in axes:
            ax.set_xlabel("step")
        if title:
            fig.suptitle(title)
        _save(fig, path)
