"""Image grids and matplotlib figures for run reports."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, PngImagePlugin  # noqa: E402


def tile(images, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Row-major grid of equally sized images; unused cells stay black."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    if len(images) == 0:
        raise ValueError("no images to tile")
    n, h, w, c = images.shape
    if cols is None:
        cols = math.ceil(math.sqrt(n)) if rows is None else math.ceil(n / rows)
    if rows is None:
        rows = math.ceil(n / cols)
    if rows * cols < n:
        raise ValueError(f"a {rows}x{cols} grid cannot hold {n} images")
    grid = np.zeros((rows * h, cols * w, c), dtype=images.dtype)
    for i in range(n):
        r, q = divmod(i, cols)
        grid[r * h:(r + 1) * h, q * w:(q + 1) * w] = images[i]
    return grid


def to_uint8(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images)
    if images.dtype == np.uint8:
        return images
    return np.round(np.clip(images, 0.0, 1.0) * 255).astype(np.uint8)


def emit_gallery(images, path, rows: int | None = None, cols: int | None = None,
                 metadata: dict | None = None) -> np.ndarray:
    """Write a PNG grid (text chunks carry ``metadata``) and return the grid pixels."""
    images = list(images) if not isinstance(images, np.ndarray) else images
    if len(images) == 0:
        raise ValueError("no images to tile")
    shapes = {np.asarray(im).shape for im in images}
    if len(shapes) != 1:
        raise ValueError(f"gallery images differ in size: {sorted(shapes)}")
    grid = tile(to_uint8(np.stack([np.asarray(im) for im in images])), rows, cols)
    info = PngImagePlugin.PngInfo()
    for k, v in sorted((metadata or {}).items()):
        info.add_text(str(k), str(v))
    Image.fromarray(grid, mode="RGB").save(path, format="PNG", pnginfo=info)
    return grid


def _finish(fig, path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return Path(path)


def plot_tradeoff(summary: list[dict], path, title: str = "reconstruction vs editability") -> Path:
    """Scatter of (editability, reconstruction) per setup."""
    fig, ax = plt.subplots(figsize=(5.5, 4.5))
    for row in summary:
        ref = row["setup"] in ("image-only", "prompt-only")
        ax.scatter(row["editability"], row["reconstruction"], marker="s" if ref else "o",
                   color="gray" if ref else None, s=40)
        ax.annotate(row["setup"], (row["editability"], row["reconstruction"]), fontsize=8,
                    xytext=(4, 3), textcoords="offset points")
    ax.set_xlabel("editability (text-image cosine)")
    ax.set_ylabel("reconstruction (image-image cosine)")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_setsize(sizes, recon, edit, path) -> Path:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    ax.plot(sizes, recon, "o-", label="reconstruction")
    ax.plot(sizes, edit, "s-", label="editability")
    ax.set_xscale("log")
    ax.set_xticks(list(sizes))
    ax.set_xticklabels([str(s) for s in sizes])
    ax.set_xlabel("training images")
    ax.set_ylabel("score")
    ax.legend()
    ax.grid(alpha=0.3)
    return _finish(fig, path)


def plot_curves(curves: dict, path, smooth: int = 50) -> Path:
    """One panel per named loss curve, raw values plus a moving average."""
    curves = {k: v for k, v in curves.items() if len(v)}
    if not curves:
        raise ValueError("no curves to plot")
    fig, axes = plt.subplots(1, len(curves), figsize=(5 * len(curves), 3.6), squeeze=False)
    for ax, (name, vals) in zip(axes[0], curves.items()):
        vals = np.asarray(vals, dtype=np.float64)
        ax.plot(vals, alpha=0.3, lw=0.7)
        if len(vals) >= smooth:
            ax.plot(np.arange(smooth - 1, len(vals)), np.convolve(vals, np.ones(smooth) / smooth, "valid"), lw=1.5)
        ax.set_title(name)
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.grid(alpha=0.3)
    return _finish(fig, path)
