"""Posterior summaries, convergence diagnostics and simulation scoring.

Pure post-processing of sample tables: highest density intervals, the split
rank-normalized R-hat convergence statistic (values >= 1.05 flag
non-convergence), and bias/MSE/coverage scoring of repeated simulation fits
with Monte Carlo standard errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True)
class PosteriorSummary:
    parameter: str
    mean: float
    median: float
    hdi_low: float
    hdi_high: float
    n_draws: int


@dataclass(frozen=True)
class PerfReport:
    """Simulation-study scoring of one estimator over repeated datasets."""

    n_datasets: int
    absolute_bias: float
    absolute_bias_se: float
    relative_bias: float | None
    relative_bias_se: float | None
    mse: float
    mse_se: float
    coverage: float
    coverage_se: float

    def __post_init__(self):
        if not 0.0 <= self.coverage <= 1.0:
            raise DiagnosticsError("coverage must lie in [0, 1]")


def hdi(samples, mass: float = 0.95) -> tuple:
    """Shortest contiguous interval over the sorted samples containing
    ceil(mass * n) draws; ties broken by the lowest starting index."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.shape[0]
    if n < 2:
        raise DiagnosticsError("hdi needs at least 2 samples")
    if not 0.0 < mass <= 1.0:
        raise DiagnosticsError("mass must lie in (0, 1]")
    m = int(math.ceil(mass * n))
    m = min(max(m, 2), n)
    widths = x[m - 1 :] - x[: n - m + 1]
    i = int(np.argmin(widths))  # argmin takes the first minimum: lowest start
    return float(x[i]), float(x[i + m - 1])


def _rank_normalize(draws: np.ndarray) -> np.ndarray:
    """Average ranks over the pooled draws mapped through the normal quantile."""
    flat = draws.ravel()
    order = np.argsort(flat, kind="stable")
    ranks = np.empty(flat.shape[0])
    ranks[order] = np.arange(1, flat.shape[0] + 1)
    # average ties
    uniq, inv, counts = np.unique(flat, return_inverse=True, return_counts=True)
    if uniq.shape[0] != flat.shape[0]:
        sums = np.bincount(inv, weights=ranks)
        ranks = (sums / counts)[inv]
    z = ndtri((ranks - 3.0 / 8.0) / (flat.shape[0] + 0.25))
    return z.reshape(draws.shape)


def r_hat(chains) -> float:
    """Split rank-normalized R-hat.

    Each chain is split in half, the pooled draws are rank-normalized, and
    the classic between/within variance ratio sqrt(var_plus / W) is computed
    on the normalized split chains.
    """
    arrs = [np.asarray(c, dtype=float) for c in chains]
    if len(arrs) < 2:
        raise DiagnosticsError("r_hat needs at least 2 chains")
    length = arrs[0].shape[0]
    if any(a.shape[0] != length for a in arrs):
        raise DiagnosticsError("chains must have equal length")
    if length < 4:
        raise DiagnosticsError("chains must have length >= 4")
    half = length // 2
    split = []
    for a in arrs:
        split.append(a[:half])
        split.append(a[length - half :])
    draws = np.stack(split)  # (m, half)
    if np.ptp(draws) == 0.0:
        raise DiagnosticsError("degenerate chains: zero total variance")
    z = _rank_normalize(draws)
    m, n = z.shape
    chain_means = z.mean(axis=1)
    w = float(np.mean(np.var(z, axis=1, ddof=1)))
    b = n * float(np.var(chain_means, ddof=1))
    if w == 0.0:
        return math.inf  # perfectly separated constant chains
    var_plus = (n - 1) / n * w + b / n
    return float(math.sqrt(var_plus / w))


def summarize(parameter: str, samples, mass: float = 0.95) -> PosteriorSummary:
    x = np.asarray(samples, dtype=float)
    lo, hi = hdi(x, mass)
    return PosteriorSummary(
        parameter=parameter,
        mean=float(x.mean()),
        median=float(np.median(x)),
        hdi_low=lo,
        hdi_high=hi,
        n_draws=int(x.shape[0]),
    )


def score_simulation(estimates, beta_true: float) -> PerfReport:
    """Bias/MSE/coverage of per-dataset posterior estimates against the truth.

    `estimates` is a sequence of (posterior_mean, hdi_low, hdi_high) per
    dataset. Relative bias is reported as absent when beta_true == 0.
    """
    est = [(float(m), float(lo), float(hi)) for m, lo, hi in estimates]
    k = len(est)
    if k < 2:
        raise DiagnosticsError("score_simulation needs at least 2 datasets")
    means = np.array([e[0] for e in est])
    covered = np.array([lo <= beta_true <= hi for _, lo, hi in est], dtype=float)
    bias = float(means.mean() - beta_true)
    bias_se = float(means.std(ddof=1) / math.sqrt(k))
    sq = (means - beta_true) ** 2
    mse = float(sq.mean())
    mse_se = float(sq.std(ddof=1) / math.sqrt(k))
    cov = float(covered.mean())
    cov_se = float(math.sqrt(cov * (1.0 - cov) / k))
    if beta_true != 0.0:
        rel = bias / beta_true
        rel_se = bias_se / abs(beta_true)
    else:
        rel = None
        rel_se = None
    return PerfReport(
        n_datasets=k,
        absolute_bias=bias,
        absolute_bias_se=bias_se,
        relative_bias=rel,
        relative_bias_se=rel_se,
        mse=mse,
        mse_se=mse_se,
        coverage=cov,
        coverage_se=cov_se,
    )
