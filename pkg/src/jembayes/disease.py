"""Survival likelihood with a time-varying cumulative exposure covariate.

Piecewise-constant baseline hazard on right-closed age intervals
(s_{k-1}, s_k] with break points (0, 40, 55, 75, 104), combined with either a
proportional hazards (PH) link exp(beta * x) or an excess hazard ratio (EHR)
link (1 + beta * x). Attained age is left truncated at entry and right
censored.

The cumulative exposure path X^cum is a right-continuous step function of
age: a year's exposure, accrued at the year-end instant, counts at and after
that instant. Exposure enters with no lag. Since both the baseline and X^cum
are piecewise constant, the cumulative hazard is an exact finite sum over
segments split at baseline break points and exposure-year boundaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import dist

BREAKPOINTS = (0.0, 40.0, 55.0, 75.0, 104.0)

# informative gamma priors (shape, scale) per baseline rate, reflecting the
# stepwise increase of the hazard with age
BASELINE_GAMMA_PRIORS = (
    (600.0, 1e-7),
    (12000.0, 1e-6),
    (46000.0, 1e-6),
    (1000.0, 1e-5),
)

BETA_PRIOR_SD = 100.0


class PositivityError(ValueError):
    """EHR hazard 1 + beta * x is not positive for some exposure in the data."""


@dataclass(frozen=True)
class BaselineHazard:
    """Piecewise-constant baseline: rate lambda_k on (s_{k-1}, s_k]."""

    rates: tuple
    breakpoints: tuple = BREAKPOINTS
    gamma_priors: tuple = BASELINE_GAMMA_PRIORS

    def __post_init__(self):
        bp = tuple(float(b) for b in self.breakpoints)
        if any(b <= a for a, b in zip(bp, bp[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        rates = tuple(float(r) for r in self.rates)
        if len(rates) != len(bp) - 1:
            raise ValueError("need one rate per interval")
        if any(r <= 0.0 for r in rates):
            raise ValueError("baseline rates must be > 0")
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "breakpoints", bp)

    def interval_of(self, age: float) -> int:
        """Index k with s_{k-1} < age <= s_k."""
        bp = self.breakpoints
        if not bp[0] < age <= bp[-1]:
            raise ValueError(f"age {age} outside (0, {bp[-1]}]")
        # right-closed intervals: age exactly at a break point belongs below
        k = int(np.searchsorted(bp, age, side="left")) - 1
        return k

    def rate_at(self, age: float) -> float:
        return self.rates[self.interval_of(age)]

    @classmethod
    def from_prior_means(cls) -> "BaselineHazard":
        rates = tuple(a * s for a, s in BASELINE_GAMMA_PRIORS)
        return cls(rates=rates)


@dataclass(frozen=True)
class DiseaseParams:
    """Exposure coefficient, baseline and model kind (PH or EHR)."""

    beta: float
    baseline: BaselineHazard
    kind: str = "PH"
    beta_prior_sd: float = BETA_PRIOR_SD

    def __post_init__(self):
        if self.kind not in ("PH", "EHR"):
            raise ValueError(f"kind must be PH or EHR, got {self.kind!r}")


@dataclass(frozen=True)
class SurvivalPath:
    """One worker's follow-up and cumulative exposure step function.

    `jump_ages` are the ascending ages where X^cum changes; `cum_values[i]`
    is the value at and after `jump_ages[i]`. Before the first jump the value
    is 0.
    """

    entry_age: float
    exit_age: float
    event: bool
    jump_ages: np.ndarray = field(default_factory=lambda: np.empty(0))
    cum_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self):
        ja = np.asarray(self.jump_ages, dtype=float)
        cv = np.asarray(self.cum_values, dtype=float)
        object.__setattr__(self, "jump_ages", ja)
        object.__setattr__(self, "cum_values", cv)
        if ja.shape != cv.shape:
            raise ValueError("jump_ages and cum_values must align")
        if ja.size and np.any(np.diff(ja) <= 0):
            raise ValueError("jump_ages must be strictly increasing")
        if cv.size and np.any(np.diff(cv) < -1e-12):
            raise ValueError("cumulative exposure must be non-decreasing")
        if not self.entry_age < self.exit_age:
            raise ValueError("entry_age must be < exit_age")

    def xcum_at(self, age: float) -> float:
        """Right-continuous step value at `age`."""
        i = int(np.searchsorted(self.jump_ages, age, side="right"))
        return 0.0 if i == 0 else float(self.cum_values[i - 1])


def link(kind: str, beta: float, xcum: float) -> float:
    if kind == "PH":
        return math.exp(beta * xcum)
    value = 1.0 + beta * xcum
    if value <= 0.0:
        raise PositivityError(
            f"EHR hazard multiplier 1 + beta*x = {value} <= 0 "
            f"(beta={beta}, x={xcum})"
        )
    return value


def hazard(params: DiseaseParams, age: float, xcum: float) -> float:
    """Instantaneous hazard at `age` for cumulative exposure `xcum`."""
    return params.baseline.rate_at(age) * link(params.kind, params.beta, xcum)


def _segments(path: SurvivalPath, breakpoints) -> list:
    """(a0, a1] segments of the follow-up split at break points and jumps."""
    cuts = {path.entry_age, path.exit_age}
    for b in breakpoints:
        if path.entry_age < b < path.exit_age:
            cuts.add(float(b))
    for j in path.jump_ages:
        if path.entry_age < j < path.exit_age:
            cuts.add(float(j))
    edges = sorted(cuts)
    return list(zip(edges[:-1], edges[1:]))


def log_likelihood(params: DiseaseParams, paths) -> float:
    """Left-truncated right-censored log-likelihood.

    sum_i [ delta_i * log h_i(Y_i) - integral_{entry_i}^{Y_i} h_i(s) ds ],
    with the integral evaluated exactly as a finite sum over segments.
    """
    total = 0.0
    bl = params.baseline
    for path in paths:
        for a0, a1 in _segments(path, bl.breakpoints):
            mid = 0.5 * (a0 + a1)
            xc = path.xcum_at(mid)
            total -= (a1 - a0) * bl.rate_at(mid) * link(params.kind, params.beta, xc)
        if path.event:
            total += math.log(hazard(params, path.exit_age, path.xcum_at(path.exit_age)))
    return total


def log_prior(params: DiseaseParams) -> float:
    """Normal prior on beta plus independent gamma priors on the baseline rates."""
    total = float(dist.norm_logpdf(params.beta, 0.0, params.beta_prior_sd))
    for rate, (shape, scale) in zip(params.baseline.rates, params.baseline.gamma_priors):
        total += float(dist.gamma_logpdf(rate, shape, scale))
    return total


def paths_from_records(records, annual_wlm=None, exposure_unit_wlm: float = 100.0):
    """Build SurvivalPaths from WorkerRecords.

    `annual_wlm` overrides the per-cell annual exposures (global cell order,
    worker-major/year-minor); by default the observed exposures are used. The
    step function is expressed in units of `exposure_unit_wlm` WLM.
    """
    paths = []
    pos = 0
    for rec in records:
        n = len(rec.cells)
        if annual_wlm is None:
            annual = np.array([c.observed_exposure for c in rec.cells], dtype=float)
        else:
            annual = np.asarray(annual_wlm[pos : pos + n], dtype=float)
        pos += n
        ages = np.array(
            [c.year - rec.birth_year + 1.0 for c in rec.cells], dtype=float
        )
        keep = ages <= rec.exit_age
        paths.append(
            SurvivalPath(
                entry_age=rec.entry_age,
                exit_age=rec.exit_age,
                event=rec.event,
                jump_ages=ages[keep],
                cum_values=np.cumsum(annual[keep]) / exposure_unit_wlm,
            )
        )
    return paths
