"""Figure rendering for the report path.

Renders the standard displays (posterior violins, trace plots, per-replicate
interval plots, R-hat histograms) to PNG files next to the delimited output.
The diagnostics layer itself stays data-only; everything here consumes plain
arrays or the delimited files it sits beside.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def render_trace(chains, parameter: str, out_png) -> Path:
    """One line per chain over retained iterations."""
    fig, ax = plt.subplots(figsize=(8, 3))
    for k, values in enumerate(chains):
        ax.plot(np.arange(len(values)), values, lw=0.6, label=f"chain {k}")
    ax.set_xlabel("retained draw")
    ax.set_ylabel(parameter)
    ax.legend(fontsize=7, ncol=4, frameon=False)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def render_violin(groups: dict, out_png, truth: float | None = None, ylabel: str = "") -> Path:
    """Violin per labelled draw set (e.g. corrected vs naive posteriors)."""
    labels = list(groups)
    data = [np.asarray(groups[k], dtype=float) for k in labels]
    fig, ax = plt.subplots(figsize=(1.5 + 1.3 * len(labels), 4))
    parts = ax.violinplot(data, showmeans=True, showextrema=False)
    for body in parts["bodies"]:
        body.set_alpha(0.6)
    if truth is not None:
        ax.axhline(truth, color="black", lw=1, ls="--")
    ax.set_xticks(np.arange(1, len(labels) + 1))
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylabel(ylabel)
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def render_estimates(estimates: dict, beta_true: float, out_png) -> Path:
    """Per-replicate posterior means and intervals, one panel per fit mode."""
    modes = [m for m in estimates if estimates[m]]
    fig, axes = plt.subplots(
        1, max(len(modes), 1), figsize=(4 * max(len(modes), 1), 3.5), sharey=True
    )
    if len(modes) <= 1:
        axes = [axes]
    for ax, mode in zip(axes, modes):
        per_rep = sorted(estimates[mode].items(), key=lambda kv: int(kv[0]))
        xs = np.arange(len(per_rep))
        means = [v[0] for _, v in per_rep]
        los = [v[1] for _, v in per_rep]
        his = [v[2] for _, v in per_rep]
        ax.errorbar(
            xs,
            means,
            yerr=[np.subtract(means, los), np.subtract(his, means)],
            fmt="o",
            ms=3,
            lw=1,
            capsize=2,
        )
        ax.axhline(beta_true, color="black", lw=1)
        ax.axhline(np.mean(means), color="goldenrod", lw=1, ls="--")
        ax.set_title(mode)
        ax.set_xlabel("replicate")
    axes[0].set_ylabel("posterior mean and 95% HDI")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png


def render_rhat_hist(rhats, out_png, threshold: float = 1.05) -> Path:
    rhats = np.asarray(rhats, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    finite = rhats[np.isfinite(rhats)]
    if finite.size:
        bins = np.linspace(min(1.0, finite.min()), max(threshold + 0.02, finite.max()), 30)
        ok = finite < threshold
        ax.hist(finite[ok], bins=bins, color="steelblue", label=f"< {threshold}")
        if (~ok).any():
            ax.hist(finite[~ok], bins=bins, color="firebrick", label=f">= {threshold}")
        ax.legend(frameon=False)
    ax.axvline(threshold, color="black", lw=1, ls="--")
    ax.set_xlabel("R-hat")
    ax.set_ylabel("count")
    fig.tight_layout()
    out_png = Path(out_png)
    fig.savefig(out_png, dpi=150)
    plt.close(fig)
    return out_png
