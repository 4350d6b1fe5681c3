"""Matplotlib figure rendering for evaluation and benchmark reports.

Figures are written next to the CSV outputs they illustrate; everything uses
the Agg backend so report generation works headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def save_convergence_figure(path, iterations, dx_mean, dtheta_mean) -> None:
    """Mean centre distance and rotation angle against refinement iteration."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.plot(iterations, dx_mean, marker="o", color="tab:blue")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("mean centre distance (voxels)")
    ax1.grid(alpha=0.3)
    ax2.plot(iterations, dtheta_mean, marker="o", color="tab:orange")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mean rotation angle (deg)")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_comparison_figure(path, rows: list[dict]) -> None:
    """Bar chart of per-row mean +/- std for centre distance and angle."""
    labels = [str(r["model_id"]) for r in rows]
    x = np.arange(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax1.bar(x, [r["dx_mean"] for r in rows], yerr=[r["dx_std"] for r in rows],
            color="tab:blue", capsize=4)
    ax1.set_xticks(x, labels, rotation=20)
    ax1.set_ylabel("centre distance (voxels)")
    ax1.grid(axis="y", alpha=0.3)
    ax2.bar(x, [r["dtheta_mean"] for r in rows], yerr=[r["dtheta_std"] for r in rows],
            color="tab:orange", capsize=4)
    ax2.set_xticks(x, labels, rotation=20)
    ax2.set_ylabel("rotation angle (deg)")
    ax2.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_loss_curve_figure(path, steps, totals) -> None:
    """Training loss against optimizer step (log scale when positive)."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, totals, color="tab:green", linewidth=1.0)
    if np.all(np.asarray(totals) > 0):
        ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
