"""Static figures written to files (SVG by default, any matplotlib format by
suffix).  Uses the non-interactive Agg backend."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import shape_reward  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def read_csv_columns(path) -> dict[str, np.ndarray]:
    """Numeric columns of a CSV log; blank cells become NaN."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    out = {}
    for key in rows[0]:
        try:
            out[key] = np.array([float(r[key]) if r[key] not in ("", None) else np.nan for r in rows])
        except ValueError:
            continue
    return out


def plot_shaping(gammas: Sequence[float], path, n: int = 201) -> Path:
    """Reward-shaping curves (1 - x) ** gamma over x in [0, 1]."""
    x = np.linspace(0.0, 1.0, n)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for g in gammas:
        ax.plot(x, shape_reward(x, g), label=f"γ = {g:g}")
    ax.set_xlabel("normalized Chamfer distance")
    ax.set_ylabel("reward")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_training_curves(logs: Mapping[str, str | Path], path, keys: Sequence[str] = ("loss", "val_loss")) -> Path:
    """One line per (log, key) against the ``step`` column."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for label, log_path in logs.items():
        cols = read_csv_columns(log_path)
        if "step" not in cols:
            raise ValueError(f"{log_path}: no step column")
        for key in keys:
            if key in cols and not np.all(np.isnan(cols[key])):
                ax.plot(cols["step"], cols[key], label=f"{label} {key}")
    ax.set_xlabel("step")
    ax.legend(frameon=False, fontsize="small")
    return _save(fig, path)


def plot_cd_by_gamma(results: Mapping[float, Sequence[float]], path) -> Path:
    """Bar per gamma: mean CD over runs, with the run spread as error bars."""
    gammas = sorted(results)
    means = [float(np.mean(results[g])) for g in gammas]
    spread = [float(np.std(results[g])) for g in gammas]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.bar([f"{g:g}" for g in gammas], means, yerr=spread, capsize=4, color="0.6", edgecolor="k")
    ax.set_xlabel("γ")
    ax.set_ylabel("mean CD (pixels)")
    return _save(fig, path)


def plot_cd_histogram(cd_pixels: Sequence[float], path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.hist(np.asarray(cd_pixels, dtype=float), bins=20, color="0.6", edgecolor="k")
    ax.set_xlabel("CD (pixels)")
    ax.set_ylabel("targets")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_rasters(rasters: Sequence[np.ndarray], path, titles: Sequence[str] | None = None) -> Path:
    """Row of 2D rasters (3D ones are shown as a max projection along depth)."""
    n = max(1, len(rasters))
    fig, axes = plt.subplots(1, n, figsize=(1.6 * n, 1.8), squeeze=False)
    for i, ax in enumerate(axes[0]):
        ax.axis("off")
        if i < len(rasters):
            r = np.asarray(rasters[i], dtype=bool)
            ax.imshow(r.any(axis=2) if r.ndim == 3 else r, cmap="gray_r", interpolation="nearest")
            if titles:
                ax.set_title(titles[i], fontsize=7)
    return _save(fig, path)
