"""SVG figures for the CLI reports."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_SVG_META = {"Date": None, "Creator": None}
plt.rcParams["svg.hashsalt"] = "spmpinn"
plt.rcParams["svg.fonttype"] = "none"


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata=_SVG_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_voltage(times, voltages: dict[str, np.ndarray], path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.6))
    for label, v in voltages.items():
        ax.plot(np.asarray(times) / 3600.0, v, label=label)
    ax.set_xlabel("time [h]")
    ax.set_ylabel("voltage [V]")
    if title:
        ax.set_title(title)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_history(rows: Sequence[dict], path: str | Path) -> Path:
    """Per-term training losses for both electrodes on a log scale."""
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4), sharey=True)
    for ax, side in zip(axes, ("pos", "neg")):
        sub = [r for r in rows if r["electrode"] == side]
        if not sub:
            continue
        ep = [r["epoch"] for r in sub]
        for key in ("L_PDE", "L_BCc", "L_BCs"):
            ax.semilogy(ep, [max(r[key], 1e-30) for r in sub], label=key, lw=0.8)
        ax.set_title(f"{side} electrode")
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("loss")
    axes[0].legend()
    return _save(fig, path)


def plot_trajectory(trajectory: Sequence[dict], names: Sequence[str], path: str | Path) -> Path:
    """Physical parameters relative to their starting values, and the voltage loss."""
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(9, 3.4))
    it = [r["iteration"] for r in trajectory]
    for n in names:
        vals = np.array([r[n] for r in trajectory])
        if vals.size:
            a1.plot(it, vals / vals[0], label=n)
    a1.set_xlabel("iteration")
    a1.set_ylabel("value / first value")
    a1.legend()
    a1.grid(alpha=0.3)
    a2.semilogy(it, [max(r["L_V"], 1e-30) for r in trajectory])
    a2.set_xlabel("iteration")
    a2.set_ylabel("voltage loss")
    a2.grid(alpha=0.3)
    return _save(fig, path)


def plot_lam_heatmap(rows: Sequence[dict], path: str | Path) -> Path:
    """Absolute volume-fraction error over the (LAM_pos, LAM_neg) grid."""
    lp = sorted({r["lam_pos"] for r in rows})
    ln = sorted({r["lam_neg"] for r in rows})
    grid = np.full((len(lp), len(ln)), np.nan)
    for r in rows:
        ae = r.get("ae", math.nan)
        grid[lp.index(r["lam_pos"]), ln.index(r["lam_neg"])] = ae
    fig, ax = plt.subplots(figsize=(4.8, 4))

    def edges(v):
        v = np.asarray(v, dtype=float) * 100
        if v.size == 1:
            return np.array([v[0] - 0.5, v[0] + 0.5])
        mid = (v[1:] + v[:-1]) / 2
        return np.concatenate([[2 * v[0] - mid[0]], mid, [2 * v[-1] - mid[-1]]])

    mesh = ax.pcolormesh(edges(ln), edges(lp), grid, cmap="viridis", shading="flat")
    fig.colorbar(mesh, ax=ax, label="absolute error in volume fraction")
    ax.set_xticks(np.asarray(ln) * 100, [f"{v * 100:g}" for v in ln])
    ax.set_yticks(np.asarray(lp) * 100, [f"{v * 100:g}" for v in lp])
    ax.set_xlabel("LAM negative [%]")
    ax.set_ylabel("LAM positive [%]")
    return _save(fig, path)
