"""Figure rendering for benchmark and evaluation outputs.

Every report path writes PNG figures next to its delimited output so runs
are inspectable without re-executing anything.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .bench import BenchRecord
from .core import Heightmap

STYLE = {"learned": ("tab:red", "o"), "full": ("tab:blue", "s"),
         "geo-6": ("tab:green", "^"), "geo-12": ("tab:olive", "v"),
         "geo-18": ("tab:purple", "D")}


def _style(name: str):
    return STYLE.get(name, ("tab:gray", "x"))


def fig_batch_sweep(records: list[BenchRecord], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    proposers = sorted({r.proposer for r in records})
    for prop in proposers:
        rows = [r for r in records if r.proposer == prop and not r.oom]
        color, marker = _style(prop)
        ax.loglog([r.batch for r in rows], [r.per_sample_ms for r in rows],
                  color=color, marker=marker, label=prop)
        ooms = [r for r in records if r.proposer == prop and r.oom]
        if ooms:
            ax.scatter([r.batch for r in ooms],
                       [max(r2.per_sample_ms for r2 in rows)] * len(ooms),
                       color=color, marker="x", s=60)
    ax.set_xlabel("batch size")
    ax.set_ylabel("per-sample step time [ms]")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_tradeoff(records: list[BenchRecord], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for r in records:
        color, marker = _style(r.proposer)
        ax.scatter(r.per_sample_ms, r.mse, color=color, marker=marker, s=70,
                   label=r.proposer)
        ax.annotate(r.proposer, (r.per_sample_ms, r.mse), fontsize=8,
                    xytext=(4, 4), textcoords="offset points")
    ax.set_xlabel("per-sample step time [ms]")
    ax.set_ylabel("per-particle MSE [m$^2$]")
    ax.set_yscale("log")
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_error_trace(traces: dict[str, list[float]], path: str | Path,
                    ylabel: str = "heightmap L1 [m]") -> None:
    fig, ax = plt.subplots(figsize=(5.5, 4))
    for label, errs in traces.items():
        ax.plot(range(len(errs)), errs, marker="o", label=label)
    ax.set_xlabel("action")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_loss_curve(curve, path: str | Path, ylabel: str = "loss") -> None:
    steps = [c[0] for c in curve]
    losses = [c[1] for c in curve]
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    ax.semilogy(steps, losses)
    ax.set_xlabel("step")
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def fig_heightmaps(panels: list[tuple[str, Heightmap]], path: str | Path) -> None:
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.2), squeeze=False)
    vals = np.concatenate([
        hm.values[hm.valid].ravel() for _, hm in panels if hm.valid.any()])
    vmin, vmax = (float(vals.min()), float(vals.max())) if vals.size else (0, 1)
    for ax, (title, hm) in zip(axes[0], panels):
        img = np.where(hm.valid, hm.values, np.nan)
        im = ax.imshow(img, origin="lower", vmin=vmin, vmax=vmax,
                       cmap="terrain",
                       extent=[hm.origin.x, hm.origin.x + hm.cell_size * hm.width,
                               hm.origin.y, hm.origin.y + hm.cell_size * hm.height])
        ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=axes[0].tolist(), shrink=0.8, label="height [m]")
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)
