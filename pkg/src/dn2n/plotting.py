"""Figures for the report command (written to files, never shown)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .report import summarize  # noqa: E402


def report_figure(rows, path) -> None:
    """Grouped bars of mean PSNR and SSIM, one group per (lambda, sigma, mode)."""
    row_keys, col_keys, means = summarize(rows)
    x = np.arange(len(row_keys))
    width = 0.8 / max(len(col_keys), 1)
    fig, axes = plt.subplots(2, 1, figsize=(max(6.0, 1.2 * len(row_keys) + 2), 6), sharex=True)
    for idx, (ax, label) in enumerate(zip(axes, ("PSNR (dB)", "SSIM"))):
        for c, col in enumerate(col_keys):
            vals = [means.get((rk, col), (np.nan, np.nan))[idx] for rk in row_keys]
            ax.bar(x + (c - (len(col_keys) - 1) / 2) * width, vals, width, label=col)
        ax.set_ylabel(label)
        ax.grid(axis="y", alpha=0.3)
    axes[0].legend(fontsize=8, ncol=min(len(col_keys), 3))
    axes[1].set_xticks(x)
    axes[1].set_xticklabels([f"{m}\n({lam:g},{s:g})" for lam, s, m in row_keys], fontsize=8)
    fig.tight_layout()
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def loss_figure(history, path) -> None:
    """Per-epoch training losses on a log scale."""
    epochs = [h.epoch for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.semilogy(epochs, [h.loss_d for h in history], label="L_D")
    if any(h.loss_a is not None for h in history):
        ax.semilogy(epochs, [h.loss_a if h.loss_a is not None else np.nan for h in history], label="L_A")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss (per pixel)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
