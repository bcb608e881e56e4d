"""Matplotlib figure emission for curves, box overlays and feature maps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Rectangle
from PIL import Image


def plot_series(xs, ys, xlabel, ylabel, title, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, ys, marker="o", markersize=3)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def draw_boxes(image: np.ndarray, boxes, path, color="lime"):
    """Overlay normalized (x, y, h, w) boxes on an HxWx3 image and save it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h_img, w_img = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(np.clip(image, 0, 1))
    for box in boxes:
        ax.add_patch(
            Rectangle(
                (box.x * w_img, box.y * h_img),
                box.w * w_img,
                box.h * h_img,
                fill=False,
                edgecolor=color,
                linewidth=2,
            )
        )
    ax.set_axis_off()
    fig.tight_layout(pad=0)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_grayscale(array: np.ndarray, path):
    """Export a 2D map (similarity/density) as an 8-bit grayscale image."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.asarray(array, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    if hi - lo < 1e-12:
        scaled = np.zeros_like(arr)
    else:
        scaled = (arr - lo) / (hi - lo)
    Image.fromarray((scaled * 255).astype(np.uint8), mode="L").save(path)
    return path
