"""Report figures (PNG via the Agg backend) and animated cine previews."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})

# Fixed PNG metadata keeps figure bytes stable across runs.
_META = {"Software": None}


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return path


def plot_history(history: Mapping[str, Sequence[float]], path, title: str = "") -> Path:
    """One line per loss series; log y when every value is positive."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    positive = True
    for name, values in history.items():
        if not isinstance(values, (list, tuple)) or not values or not np.isscalar(values[0]):
            continue
        v = np.asarray(values, dtype=float)
        positive &= bool(np.all(v > 0))
        ax.plot(np.arange(1, len(v) + 1), v, marker=".", label=name)
    if positive:
        ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_recovery(true: Sequence[float], est: Sequence[float], path, r: float, mae: float) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    true = np.asarray(true)
    ax.scatter(true, est, s=14, alpha=0.8)
    lo, hi = float(min(true.min(), np.min(est))), float(max(true.max(), np.max(est)))
    ax.plot([lo, hi], [lo, hi], color="0.5", lw=0.8, ls="--")
    ax.set_xlabel("conditioning contraction amplitude")
    ax.set_ylabel("recovered from generated video")
    ax.set_title(f"r = {r:.3f}, MAE = {mae:.3f}")
    return _save(fig, path)


def plot_radius_curves(real: Sequence[np.ndarray], generated: Sequence[np.ndarray], ids: Sequence[str], path) -> Path:
    n = len(ids)
    fig, axes = plt.subplots(1, n, figsize=(2.6 * n, 2.4), squeeze=False)
    for ax, r, g, rid in zip(axes[0], real, generated, ids):
        ax.plot(r, label="phantom")
        ax.plot(g, label="generated")
        ax.set_title(rid)
        ax.set_xlabel("frame")
    axes[0, 0].set_ylabel("inner radius (px)")
    axes[0, 0].legend(frameon=False)
    return _save(fig, path)


def plot_frames(cines: Sequence[np.ndarray], labels: Sequence[str], path, frames=(0, 12, 25, 37)) -> Path:
    """Grid of selected frames; one row per sequence."""
    rows = len(cines)
    fig, axes = plt.subplots(rows, len(frames), figsize=(1.6 * len(frames), 1.6 * rows), squeeze=False)
    for i, (cine, label) in enumerate(zip(cines, labels)):
        video = np.asarray(cine).reshape(-1, *np.asarray(cine).shape[-2:])
        for j, f in enumerate(frames):
            ax = axes[i, j]
            ax.imshow(video[f], cmap="gray", vmin=0, vmax=1)
            ax.set_xticks([])
            ax.set_yticks([])
            if i == 0:
                ax.set_title(f"frame {f}")
        axes[i, 0].set_ylabel(label, fontsize=7)
    return _save(fig, path)


def plot_mixing(ratios: Sequence[float], curves: Mapping[str, tuple[Sequence[float], Sequence[float]]],
                path, ylabel: str) -> Path:
    """Metric mean +- std against mixing ratio, one line per metric."""
    fig, ax = plt.subplots(figsize=(4, 3))
    x = 100 * np.asarray(ratios, dtype=float)
    for name, (mean, std) in curves.items():
        ax.errorbar(x, mean, yerr=std, marker="o", capsize=3, label=name)
    ax.set_xlabel("synthetic mixing (%)")
    ax.set_ylabel(ylabel)
    ax.set_xticks(x)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(names: Sequence[str], means: Sequence[float], stds: Sequence[float], path,
                  ylabel: str = "Pearson r") -> Path:
    fig, ax = plt.subplots(figsize=(4.2, 3))
    ax.bar(np.arange(len(names)), means, yerr=stds, capsize=3, color="0.6")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=20, ha="right")
    ax.axhline(0, color="k", lw=0.6)
    ax.set_ylabel(ylabel)
    return _save(fig, path)


def plot_alpha_sweep(alphas: Sequence[float], values: Sequence[float], path, ylabel: str = "Pearson r") -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3))
    ax.plot(alphas, values, marker="o")
    ax.set_xlabel("noise scale alpha")
    ax.set_ylabel(ylabel)
    ax.set_xticks(list(alphas))
    return _save(fig, path)


def save_gif(cine: np.ndarray, path, fps: int = 20, scale: int = 2) -> Path:
    """Loop a ``(1, T, H, W)`` or ``(T, H, W)`` cine in [0, 1] as a grayscale GIF."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    video = np.asarray(cine).reshape(-1, *np.asarray(cine).shape[-2:])
    frames = [Image.fromarray((np.clip(f, 0, 1) * 255).round().astype(np.uint8)) for f in video]
    if scale != 1:
        frames = [f.resize((f.width * scale, f.height * scale), Image.NEAREST) for f in frames]
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=int(1000 / fps), loop=0)
    return path
