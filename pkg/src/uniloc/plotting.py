"""Figures written next to the CSV outputs (headless matplotlib)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_cdfs(reports, path, title: str = "Positioning error CDF") -> None:
    """Empirical error CDFs, one curve per report."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for rep in reports:
        err, pct = rep.cdf()
        ax.step(err, pct / 100.0, where="post", label=f"{rep.method} (MAE {rep.mae_all:.2f} m)")
    ax.set_xlabel("error (m)")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1.01)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(rows, path) -> None:
    """MAE against identification accuracy, per method and user subset."""
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.6), sharex=True)
    for ax, key, label in zip(axes, ("mae_los", "mae_nlos", "mae_all"), ("LoS users", "NLoS users", "all users")):
        for method in sorted({r.method for r in rows}):
            pts = sorted((r.p_i, getattr(r, key)) for r in rows if r.method == method)
            ax.plot([p for p, _ in pts], [m for _, m in pts], marker="o", label=method)
        ax.set_title(label)
        ax.set_xlabel("identification accuracy")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("MAE (m)")
    axes[0].legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_loss(history, path, title: str = "training loss") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.semilogy(range(1, len(history) + 1), history)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
