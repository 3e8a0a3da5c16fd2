"""Matplotlib figures for reports: MSE grids and attribution heatmaps."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .xai import AttributionMap  # noqa: E402


def plot_mse_grid(grid: np.ndarray, ps: Sequence[int], dns: Sequence[int], title: str, path: str | Path) -> Path:
    """p-by-dn MSE grid with the value printed in each cell."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(1.2 * len(dns) + 2, 0.8 * len(ps) + 1.6))
    im = ax.imshow(grid, cmap="viridis_r", aspect="auto")
    ax.set_xticks(range(len(dns)), [f"Δn={d}" for d in dns])
    ax.set_yticks(range(len(ps)), [f"p={p}" for p in ps])
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.4f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="MSE")
    fig.tight_layout()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_attribution(
    amap: AttributionMap, columns: Sequence[str], target_columns: Sequence[str], path: str | Path
) -> Path:
    """Heatmap of an aggregate map; rows are input timesteps (oldest on top)."""
    path = Path(path)
    grid = amap.scaled()
    fig, ax = plt.subplots(figsize=(4, 0.25 * grid.shape[0] + 1.5))
    im = ax.imshow(grid, cmap="inferno", aspect="auto", vmin=0, vmax=1)
    ax.set_xticks(range(len(columns)), list(columns), rotation=45, ha="right")
    ax.set_ylabel("input row")
    ax.set_title(f"{amap.method}: {target_columns[amap.output_index]}")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
    return path
