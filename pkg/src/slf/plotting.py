"""Figure rendering for the CLI reports (headless matplotlib)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_projection(points: np.ndarray, style_factors, speaker_ids, path, title: Optional[str] = None) -> Path:
    """Scatter of 2-D points, coloured by style and marked by speaker."""
    style_factors = np.asarray(style_factors)
    speaker_ids = np.asarray(speaker_ids)
    markers = "os^vD<>p*h"
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("tab10")
    for s in np.unique(style_factors):
        for k, spk in enumerate(np.unique(speaker_ids)):
            sel = (style_factors == s) & (speaker_ids == spk)
            if not sel.any():
                continue
            ax.scatter(points[sel, 0], points[sel, 1], s=12, color=cmap(int(s) % 10),
                       marker=markers[k % len(markers)], alpha=0.7,
                       label=f"style {s}" if k == 0 else None, linewidths=0)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.legend(loc="best", fontsize=8, markerscale=1.5)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_sweep(outputs: Sequence[np.ndarray], stats: Sequence[Dict[str, float]], path,
               title: Optional[str] = None) -> Path:
    """One spectrogram panel per swept value plus a row of summary curves."""
    n = len(outputs)
    fig = plt.figure(figsize=(2.4 * max(n, 3), 5.5))
    grid = fig.add_gridspec(2, n, height_ratios=[2, 1])
    vmin = min(float(o.min()) for o in outputs)
    vmax = max(float(o.max()) for o in outputs)
    for i, (feats, st) in enumerate(zip(outputs, stats)):
        ax = fig.add_subplot(grid[0, i])
        ax.imshow(feats.T, origin="lower", aspect="auto", vmin=vmin, vmax=vmax, cmap="magma")
        ax.set_title(f"{st['value']:+.2f}", fontsize=9)
        ax.set_xlabel("frame", fontsize=8)
        if i == 0:
            ax.set_ylabel("bin", fontsize=8)
    values = [st["value"] for st in stats]
    keys = [("frames", "frames"), ("mean_log_energy", "mean log-energy"), ("centroid_mean", "centroid")]
    sub = grid[1, :].subgridspec(1, len(keys))
    for j, (key, label) in enumerate(keys):
        ax = fig.add_subplot(sub[0, j])
        ax.plot(values, [st[key] for st in stats], marker="o")
        ax.set_xlabel("value", fontsize=8)
        ax.set_ylabel(label, fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_ablation(table: Sequence[Dict[str, object]], path) -> Path:
    """Grouped bars of style silhouette and leakage per ablation row and variant."""
    variants = sorted({t["variant"] for t in table})
    rows = []
    for t in table:
        if t["row"] not in rows:
            rows.append(t["row"])
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    width = 0.8 / max(len(variants), 1)
    x = np.arange(len(rows))
    for metric, ax, label in (("style_silhouette", axes[0], "style silhouette"),
                              ("leakage", axes[1], "leakage accuracy")):
        for k, v in enumerate(variants):
            means, stds = [], []
            for r in rows:
                hit = [t for t in table if t["variant"] == v and t["row"] == r]
                means.append(hit[0][f"{metric}_mean"] if hit else np.nan)
                stds.append(hit[0][f"{metric}_std"] if hit else 0.0)
            ax.bar(x + k * width, means, width, yerr=stds, label=v, capsize=3)
        ax.set_xticks(x + width * (len(variants) - 1) / 2)
        ax.set_xticklabels(rows, rotation=20, fontsize=8)
        ax.set_ylabel(label)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
