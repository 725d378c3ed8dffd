"""Synthetic occupational cohort generator with known truth.

Reproduces the validation data-generating mechanism: workers get synthetic
employment histories over objects/activities, all uncertain factors and their
shared classical and Berkson errors are drawn once per shared-error group,
observed and true exposures are computed from the same reconstruction
formulas, and survival times come from exact inversion of the
piecewise-constant cumulative hazard driven by the true exposures. There are
no transferred concentration values (so no concentration Berkson components).

Layout parameters (objects, activities, period lengths, employment-history
shape, entry ages, follow-up end) are documented desk-scale defaults.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import dist, measurement
from .cohort import CELL_COLUMNS, CohortData, WORKER_COLUMNS
from .disease import BaselineHazard, link
from .measurement import MODEL_FACTORS, build_layouts

DEFAULT_MODEL_MIX = {
    "M1a": 0.15,
    "M2": 0.40,
    "M2_Expert": 0.15,
    "M3": 0.15,
    "M4": 0.15,
}

MISSPECIFICATION_FLAGS = ("swap_normal_lognormal", "force_uniform_beta")


@dataclass(frozen=True)
class SimScenario:
    """Configuration of one synthetic-cohort scenario."""

    n_workers: int = 1000
    beta_true: float = 0.3
    kind: str = "PH"
    baseline_rates: tuple = tuple(s * a for a, s in ((600.0, 1e-7), (12000.0, 1e-6), (46000.0, 1e-6), (1000.0, 1e-5)))
    model_mix: dict = field(default_factory=lambda: dict(DEFAULT_MODEL_MIX))
    first_year: int = 1955
    n_years: int = 12
    n_objects: int = 10
    n_activities: int = 3
    period_len_time: int = 3
    period_len_conc: int = 3
    entry_age_range: tuple = (18, 40)
    mean_duration: float = 8.0
    object_switch_prob: float = 0.15
    activity_switch_prob: float = 0.3
    m0_rate: float = 0.05
    followup_end_year: int = 2005
    time_fraction_range: tuple = (0.7, 1.1)
    n_ref_objects: int = 2
    exposure_unit_wlm: float = 100.0
    misspecification: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.n_workers <= 0:
            raise ValueError("n_workers must be > 0")
        if self.kind != "PH":
            raise ValueError("only PH data generation is supported")
        total = sum(self.model_mix.values())
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"model mix weights must sum to 1, got {total}")
        unknown = set(self.model_mix) - set(MODEL_FACTORS)
        if unknown:
            raise ValueError(f"unknown model tags in mix: {sorted(unknown)}")
        for flag in self.misspecification:
            if flag not in MISSPECIFICATION_FLAGS:
                raise ValueError(f"unknown misspecification flag {flag!r}")


@dataclass
class SimTruth:
    """Everything the generator drew: factor truths and true exposures."""

    beta_true: float
    baseline_rates: tuple
    cells: pd.DataFrame  # worker_id, year, true_exposure (final cell ordering)
    factors: dict  # (tag, name) -> {hyper, level, classical_error, berkson_error}
    scenario: SimScenario


def apply_misspecification(scenario: SimScenario, registry: dict) -> dict:
    """Fit-time registry implied by the scenario's misspecification flags.

    Generation always uses the standard registry; with no flags the fit
    registry is identical.
    """
    out = registry
    for flag in scenario.misspecification:
        if flag == "swap_normal_lognormal":
            out = measurement.swap_concentration_error_families(out)
        elif flag == "force_uniform_beta":
            out = measurement.pin_uniform_beta(out)
        else:
            raise ValueError(f"unknown misspecification flag {flag!r}")
    return out


def _assign_objects(scenario: SimScenario, rng) -> dict:
    """Objects -> model tags, proportional to the mix (every active tag gets one)."""
    tags = [t for t, w in scenario.model_mix.items() if w > 0]
    if scenario.n_objects < len(tags):
        raise ValueError("need at least one object per active model tag")
    weights = np.array([scenario.model_mix[t] for t in tags])
    counts = np.maximum(1, np.floor(weights * scenario.n_objects).astype(int))
    while counts.sum() > scenario.n_objects:
        counts[int(np.argmax(counts))] -= 1
    while counts.sum() < scenario.n_objects:
        counts[int(np.argmax(weights - counts / scenario.n_objects))] += 1
    tag_of_object = {}
    obj = 1
    for tag, c in zip(tags, counts):
        for _ in range(c):
            tag_of_object[obj] = tag
            obj += 1
    return tag_of_object


def _histories(scenario: SimScenario, tag_of_object, rng):
    """Per-worker employment rows (before factor draws and survival)."""
    objects = np.array(sorted(tag_of_object))
    lo_age, hi_age = scenario.entry_age_range
    last_year = scenario.first_year + scenario.n_years - 1
    rows = []
    workers = []
    for wid in range(1, scenario.n_workers + 1):
        hire = int(rng.integers(scenario.first_year, last_year + 1))
        max_dur = last_year - hire + 1
        duration = int(min(rng.geometric(1.0 / scenario.mean_duration), max_dur))
        entry_age = int(rng.integers(lo_age, hi_age + 1))
        birth = hire - entry_age
        obj = int(rng.choice(objects))
        act = int(rng.integers(1, scenario.n_activities + 1))
        for j in range(duration):
            year = hire + j
            if j > 0 and rng.uniform() < scenario.object_switch_prob:
                obj = int(rng.choice(objects))
            if j > 0 and rng.uniform() < scenario.activity_switch_prob:
                act = int(rng.integers(1, scenario.n_activities + 1))
            unexposed = rng.uniform() < scenario.m0_rate
            rows.append(
                {
                    "worker_id": wid,
                    "year": year,
                    "object_id": obj,
                    "activity_id": act,
                    "model_tag": "M0" if unexposed else tag_of_object[obj],
                    "time_fraction": float(
                        rng.uniform(*scenario.time_fraction_range)
                    ),
                    "transfer_factor": 1.0,
                    "transferred": 0,
                    "period_time": (year - scenario.first_year)
                    // scenario.period_len_time,
                    "period_conc": (year - scenario.first_year)
                    // scenario.period_len_conc,
                }
            )
        censor_age = min(
            float(scenario.followup_end_year - birth), BaselineHazard.from_prior_means().breakpoints[-1]
        )
        workers.append(
            {
                "worker_id": wid,
                "birth_year": birth,
                "entry_age": float(entry_age),
                "exit_age": censor_age,  # provisional; survival fills this in
                "event": 0,
            }
        )
    cells = pd.DataFrame(rows).sort_values(["worker_id", "year"], kind="stable")
    cells = cells.reset_index(drop=True)
    return pd.DataFrame(workers), cells


def _fill_m1a_aux(scenario: SimScenario, cells: pd.DataFrame, rng) -> None:
    """Known error-free series for the two-term model: r(t,o), A(t,o), ref links."""
    for col in ("aux_r", "aux_a", "aux_a_ref", "ref_key"):
        cells[col] = np.nan
    mask = (cells["model_tag"] == "M1a").to_numpy()
    if not mask.any():
        return
    sub = cells.loc[mask]
    objs = sorted(set(sub["object_id"].astype(int)))
    ref_of_obj = {o: 1 + i % scenario.n_ref_objects for i, o in enumerate(objs)}
    a_ref_of_ref = {
        r: float(rng.uniform(0.8, 1.2)) for r in sorted(set(ref_of_obj.values()))
    }
    pairs = sorted(set(zip(sub["year"].astype(int), sub["object_id"].astype(int))))
    r_of_pair = {p: float(rng.uniform(0.0, 1.0)) for p in pairs}
    a_of_pair = {p: float(rng.uniform(0.6, 1.4)) for p in pairs}
    idx = np.flatnonzero(mask)
    years = sub["year"].astype(int).to_numpy()
    objects = sub["object_id"].astype(int).to_numpy()
    cells.loc[idx, "aux_r"] = [r_of_pair[(y, o)] for y, o in zip(years, objects)]
    cells.loc[idx, "aux_a"] = [a_of_pair[(y, o)] for y, o in zip(years, objects)]
    cells.loc[idx, "ref_key"] = [float(ref_of_obj[o]) for o in objects]
    cells.loc[idx, "aux_a_ref"] = [
        a_ref_of_ref[ref_of_obj[o]] for o in objects
    ]


def _draw_block_truth(layout, rng):
    """Hyper, levels and shared errors for one factor block."""
    spec = layout.spec
    expo = spec.exposure
    C, B = layout.n_classical, layout.n_berkson
    hyper = {}
    if expo.family == "truncated_normal_positive":
        if expo.has_hyper:
            T = len(layout.years)
            hyper["mu"] = dist.sample_normal(rng, expo.mu_prior[0], expo.mu_prior[1], T)
            hyper["sigma"] = dist.sample_truncnorm_pos(
                rng, expo.sigma_prior[0], expo.sigma_prior[1], T
            )
            mu = hyper["mu"][layout.year_idx]
            sigma = hyper["sigma"][layout.year_idx]
        else:
            mu, sigma = expo.fixed["mu"], expo.fixed["sigma"]
        level = dist.sample_truncnorm_pos(rng, mu, sigma, C)
    else:
        lo, up = expo.bounds
        if expo.has_hyper:
            hyper["a"] = float(
                dist.sample_truncnorm_pos(rng, expo.a_prior[0], expo.a_prior[1])
            )
            hyper["b"] = float(
                dist.sample_truncnorm_pos(rng, expo.b_prior[0], expo.b_prior[1])
            )
            a, b = hyper["a"], hyper["b"]
        else:
            a, b = expo.fixed["a"], expo.fixed["b"]
        level = dist.sample_scaled_beta(rng, lo, up, a, b, C)
    if spec.classical.family == "additive_normal":
        cls_err = dist.sample_normal(rng, 0.0, spec.classical.sd, C)
    elif spec.classical.family == "multiplicative_lognormal":
        sd = spec.classical.sd
        cls_err = dist.sample_lognormal(rng, -0.5 * sd * sd, sd, C)
    else:
        cls_err = np.zeros(C)
    brk_err = np.ones(B)
    act = layout.active_brk
    if act.any():
        sd = spec.berkson.sd
        brk_err[act] = dist.sample_lognormal(rng, -0.5 * sd * sd, sd, int(act.sum()))
    observed = measurement.apply_classical(spec, level, cls_err)
    true = measurement.apply_berkson(
        spec, level[layout.index.cls_of_brk], brk_err, layout.tau_brk
    )
    return hyper, level, cls_err, brk_err, observed, true


def generate_survival(
    beta_true: float,
    kind: str,
    baseline: BaselineHazard,
    entry_age: np.ndarray,
    censor_age: np.ndarray,
    paths,
    rng,
):
    """Event times by exact inversion of the piecewise-constant cumulative hazard.

    `paths` yields one (jump_ages, cum_values) pair per worker (cumulative
    exposure step function in disease-model units). Returns (exit_age, event)
    with administrative censoring at `censor_age`.
    """
    n = len(entry_age)
    exit_age = np.empty(n)
    event = np.zeros(n, dtype=int)
    bp = baseline.breakpoints
    for i, (jumps, cums) in enumerate(paths):
        a0 = float(entry_age[i])
        cend = float(censor_age[i])
        edges = {a0, cend}
        edges.update(b for b in bp if a0 < b < cend)
        edges.update(float(j) for j in jumps if a0 < j < cend)
        edges = sorted(edges)
        target = rng.exponential(1.0)
        cum_h = 0.0
        t_event = None
        for lo, hi in zip(edges[:-1], edges[1:]):
            mid = 0.5 * (lo + hi)
            pos = int(np.searchsorted(jumps, mid, side="right"))
            x = 0.0 if pos == 0 else float(cums[pos - 1])
            h = baseline.rate_at(mid) * link(kind, beta_true, x)
            step = h * (hi - lo)
            if cum_h + step >= target:
                t_event = lo + (target - cum_h) / h
                break
            cum_h += step
        if t_event is None:
            exit_age[i] = cend
        else:
            exit_age[i] = t_event
            event[i] = 1
    return exit_age, event


def generate_cohort(scenario: SimScenario, registry: dict | None = None):
    """Generate one synthetic cohort. Returns (CohortData, SimTruth)."""
    if registry is None:
        registry = measurement.load_registry()
    rng = np.random.default_rng([int(scenario.seed), 101])
    tag_of_object = _assign_objects(scenario, rng)
    workers, cells = _histories(scenario, tag_of_object, rng)
    if not len(cells):
        raise ValueError("degenerate scenario: no exposure cells generated")
    _fill_m1a_aux(scenario, cells, rng)

    # observed factor columns start empty; M0 cells stay empty throughout
    for col in measurement.FACTOR_OBS_COLUMNS.values():
        cells[col] = np.nan
    cells["observed_exposure"] = 0.0
    cells = cells.reindex(columns=list(CELL_COLUMNS))

    prelim = CohortData(workers=workers.copy(), cells=cells)
    layouts = build_layouts(prelim, registry, require_observed=False)

    truth_factors = {}
    obs_cellvals = {}
    true_cellvals = {}
    for tag in [t for t in MODEL_FACTORS if t != "M0"]:
        for name in MODEL_FACTORS[tag]:
            if (tag, name) not in layouts:
                continue
            layout = layouts[(tag, name)]
            hyper, level, cls_err, brk_err, observed, true = _draw_block_truth(
                layout, rng
            )
            idx = layout.index
            truth_factors[(tag, name)] = {
                "hyper": {k: np.asarray(v).tolist() for k, v in hyper.items()},
                "level": {str(k): float(v) for k, v in zip(idx.classical_keys, level)},
                "observed": {
                    str(k): float(v) for k, v in zip(idx.classical_keys, observed)
                },
                "classical_error": {
                    str(k): float(v) for k, v in zip(idx.classical_keys, cls_err)
                },
                "berkson_error": {
                    str(k): float(v) for k, v in zip(idx.berkson_keys, brk_err)
                },
            }
            obs_cellvals.setdefault(tag, {})[name] = observed[idx.cls_of_cell]
            true_cellvals.setdefault(tag, {})[name] = true[idx.brk_of_cell]
            col = measurement.FACTOR_OBS_COLUMNS[name]
            cells.loc[layout.cell_rows, col] = observed[idx.cls_of_cell]

    true_exposure = np.zeros(len(cells))
    observed_exposure = np.zeros(len(cells))
    for tag, values in obs_cellvals.items():
        mask = (cells["model_tag"] == tag).to_numpy()
        frame = cells.loc[mask]
        observed_exposure[mask] = measurement.reconstruct_cells(tag, frame, values)
        true_exposure[mask] = measurement.reconstruct_cells(
            tag, frame, true_cellvals[tag]
        )
    cells["observed_exposure"] = observed_exposure

    # survival from the true exposures
    birth = workers["birth_year"].to_numpy()
    entry = workers["entry_age"].to_numpy(dtype=float)
    censor = np.minimum(
        scenario.followup_end_year - birth.astype(float),
        BaselineHazard.from_prior_means().breakpoints[-1],
    )
    wid_order = {w: i for i, w in enumerate(workers["worker_id"])}
    widx = cells["worker_id"].map(wid_order).to_numpy()
    age_end = (
        cells["year"].to_numpy(dtype=float) - birth[widx].astype(float) + 1.0
    )
    paths = []
    for i in range(len(workers)):
        sel = widx == i
        jumps = age_end[sel]
        cums = np.cumsum(true_exposure[sel]) / scenario.exposure_unit_wlm
        paths.append((jumps, cums))
    baseline = BaselineHazard(rates=scenario.baseline_rates)
    exit_age, event = generate_survival(
        scenario.beta_true, scenario.kind, baseline, entry, censor, paths, rng
    )
    workers["exit_age"] = exit_age
    workers["event"] = event

    # drop exposure years that end after death; a year accrues at its end
    keep = age_end <= np.ceil(exit_age[widx])
    cells = cells.loc[keep].reset_index(drop=True)
    true_exposure = true_exposure[keep]

    truth_cells = pd.DataFrame(
        {
            "worker_id": cells["worker_id"].astype(int),
            "year": cells["year"].astype(int),
            "true_exposure": true_exposure,
        }
    )
    cohort = CohortData(
        workers=workers.reindex(columns=list(WORKER_COLUMNS)),
        cells=cells.reindex(columns=list(CELL_COLUMNS)),
    )
    truth = SimTruth(
        beta_true=scenario.beta_true,
        baseline_rates=tuple(scenario.baseline_rates),
        cells=truth_cells,
        factors=truth_factors,
        scenario=scenario,
    )
    return cohort, truth


def write_dataset(cohort: CohortData, truth: SimTruth, path) -> None:
    """Write cohort files plus the truth companion (truth.csv, truth_factors.json)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cohort.workers.to_csv(path / "workers.csv", index=False, float_format="%.17g")
    cohort.cells.to_csv(path / "cells.csv", index=False, float_format="%.17g")
    truth.cells.to_csv(path / "truth.csv", index=False, float_format="%.17g")
    payload = {
        "beta_true": truth.beta_true,
        "baseline_rates": list(truth.baseline_rates),
        "scenario": _scenario_dict(truth.scenario),
        "factors": {
            f"{tag}/{name}": vals for (tag, name), vals in truth.factors.items()
        },
    }
    with open(path / "truth_factors.json", "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)


def _scenario_dict(scenario: SimScenario) -> dict:
    out = asdict(scenario)
    out["baseline_rates"] = list(out["baseline_rates"])
    out["entry_age_range"] = list(out["entry_age_range"])
    out["time_fraction_range"] = list(out["time_fraction_range"])
    out["misspecification"] = list(out["misspecification"])
    return out


def scenario_from_dict(raw: dict) -> SimScenario:
    kwargs = dict(raw)
    for key in ("baseline_rates", "entry_age_range", "time_fraction_range", "misspecification"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return SimScenario(**kwargs)


def load_truth(path) -> tuple:
    """Read (truth_cells, payload) written by write_dataset."""
    path = Path(path)
    cells = pd.read_csv(path / "truth.csv")
    with open(path / "truth_factors.json") as fh:
        payload = json.load(fh)
    return cells, payload
