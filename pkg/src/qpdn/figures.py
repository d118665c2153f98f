"""Matplotlib renderings of the report artifacts (PNG, headless backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .quantum import ProcessMatrix
from .reporting import FidelityTable, Heatmap


def _symmetric_imshow(ax, grid, vmax):
    img = ax.imshow(grid, cmap="RdBu_r", vmin=-vmax, vmax=vmax, interpolation="nearest")
    ax.set_xticks([0, 5, 10, 15])
    ax.set_yticks([0, 5, 10, 15])
    return img


def save_heatmap_png(h: Heatmap, path, title: str | None = None) -> str:
    vmax = max(float(np.max(np.abs(h.re))), float(np.max(np.abs(h.im))), 1e-30)
    fig, axes = plt.subplots(1, 2, figsize=(7.6, 3.4))
    for ax, (name, grid) in zip(axes, h.channels()):
        img = _symmetric_imshow(ax, grid, vmax)
        ax.set_title(name)
    fig.colorbar(img, ax=axes, shrink=0.85)
    fig.suptitle(title or h.source)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_chi_png(pm: ProcessMatrix, path, title: str | None = None) -> str:
    h = Heatmap(re=pm.chi.real, im=pm.chi.imag, source=pm.label)
    return save_heatmap_png(h, path, title=title)


def save_fidelity_png(table: FidelityTable, path) -> str:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    degs = [np.degrees(p) for p in table.phis]
    for j, method in enumerate(table.methods):
        ax.errorbar(degs, table.mean[:, j], yerr=table.std[:, j], marker="o", capsize=3, label=method)
    ax.set_xlabel("phi (degrees)")
    ax.set_ylabel("process fidelity")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_residue_png(report, path) -> str:
    ratios = sorted({row[3] for row in report.rows})
    fig, axes = plt.subplots(1, len(ratios), figsize=(4.2 * len(ratios), 3.6), sharey=True, squeeze=False)
    for ax, ratio in zip(axes[0], ratios):
        rows = [r for r in report.rows if r[3] == ratio]
        true = [r[0] for r in rows]
        res = [r[2] for r in rows]
        ax.scatter(true, res, s=8, alpha=0.5)
        ax.axhline(report.gate, color="tab:blue", lw=1)
        ax.axhline(-report.gate, color="tab:blue", lw=1)
        ax.set_title(f"r = {ratio:g} (success {report.per_ratio.get(ratio, 0):.1%})")
        ax.set_xlabel("true phi (degrees)")
    axes[0][0].set_ylabel("residue (degrees)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_sweep_png(report, path) -> str:
    ks = [e.kernel for e in report.entries]
    val = [e.val_mse for e in report.entries]
    fid = [e.test_mean_fidelity for e in report.entries]
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.plot(ks, val, marker="o", color="tab:red", label="validation MSE")
    ax.set_xlabel("kernel size")
    ax.set_ylabel("validation MSE", color="tab:red")
    ax.axvline(report.best_k, color="gray", ls="--", lw=1)
    ax2 = ax.twinx()
    ax2.plot(ks, fid, marker="s", color="tab:blue", label="test fidelity")
    ax2.set_ylabel("mean test fidelity", color="tab:blue")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)


def save_training_png(log, path) -> str:
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    epochs = [e[0] for e in log.epochs]
    ax.plot(epochs, [e[1] for e in log.epochs], label="train MSE")
    ax.plot(epochs, [e[2] for e in log.epochs], label="validation MSE")
    if log.best_epoch > 0:
        ax.axvline(log.best_epoch, color="gray", ls="--", lw=1)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return str(path)
