"""Orchestration: simulate replicate datasets, fit chains in parallel, score.

Every entry point here is deterministic given its seed(s): replicate r of a
study derives its scenario seed from the base seed, and chain k of a fit
draws from a generator keyed by (seed, stream, chain). Chains run as
independent processes sharing nothing but the immutable inputs.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import diagnostics, measurement, simgen
from .cohort import CohortData
from .diagnostics import PerfReport, r_hat, summarize
from .sampler import FitContext, SamplerConfig, run_chain
from .simgen import SimScenario

FIT_MODES = ("corrected", "naive", "true")
_MODE_STREAM = {"corrected": 11, "naive": 13, "true": 17}


def default_jobs() -> int:
    env = os.environ.get("JEMBAYES_JOBS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


def truth_annual_for(cohort: CohortData, truth_cells: pd.DataFrame) -> np.ndarray:
    """True per-cell exposures aligned to the cohort's frozen cell order."""
    merged = cohort.cells[["worker_id", "year"]].merge(
        truth_cells, on=["worker_id", "year"], how="left", validate="one_to_one"
    )
    vals = merged["true_exposure"].to_numpy(dtype=float)
    if np.isnan(vals).any():
        raise ValueError("truth file does not cover every cohort cell")
    return vals


def _chain_job(args):
    (config, cohort, registry, mode, chain_index, rng_keys, truth_annual, out_path,
     ckpt_path, resume) = args
    try:
        table = run_chain(
            config,
            cohort,
            registry,
            mode=mode,
            chain_index=chain_index,
            rng_keys=rng_keys,
            truth_annual=truth_annual,
            out_path=out_path,
            checkpoint_path=ckpt_path,
            resume=resume,
        )
        return ("ok", chain_index, table, table.attrs.get("acceptance", {}))
    except Exception as exc:  # reported, replicate excluded from scoring
        return ("error", chain_index, f"{type(exc).__name__}: {exc}", {})


def run_fit(
    cohort: CohortData,
    registry: dict,
    config: SamplerConfig,
    out_dir=None,
    *,
    mode: str = "corrected",
    truth_cells: pd.DataFrame | None = None,
    rng_stream: int = 0,
    n_jobs: int | None = None,
    resume: bool = False,
):
    """Fit one cohort with `config.n_chains` concurrent chains.

    Returns (tables, errors): per-chain sample tables and a list of error
    strings for chains that failed. Writes chain_<k>.csv files plus a
    run manifest when `out_dir` is given.
    """
    if mode not in FIT_MODES:
        raise ValueError(f"unknown fit mode {mode!r}")
    truth_annual = None
    if mode == "true":
        if truth_cells is None:
            raise ValueError("true-exposure fit needs the truth table")
        truth_annual = truth_annual_for(cohort, truth_cells)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    jobs = []
    for k in range(config.n_chains):
        out_path = out_dir / f"chain_{k}.csv" if out_dir is not None else None
        ckpt = out_dir / f"chain_{k}.ckpt" if out_dir is not None else None
        keys = [int(config.seed), _MODE_STREAM[mode], int(rng_stream)]
        jobs.append(
            (config, cohort, registry, mode, k, keys, truth_annual, out_path, ckpt, resume)
        )
    n_jobs = min(n_jobs or default_jobs(), config.n_chains)
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]

    tables, errors, acceptance = [], [], {}
    for status, k, payload, acc in results:
        if status == "ok":
            tables.append(payload)
            acceptance[f"chain_{k}"] = acc
        else:
            errors.append(f"chain {k}: {payload}")
    if out_dir is not None:
        manifest = {
            "mode": mode,
            "config": asdict(config),
            "registry_hash": measurement.registry_hash(registry),
            "rng_stream": rng_stream,
            "n_chains_ok": len(tables),
            "errors": errors,
            "acceptance": acceptance,
        }
        with open(out_dir / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
    return tables, errors


def load_fit(fit_dir) -> list:
    fit_dir = Path(fit_dir)
    paths = sorted(fit_dir.glob("chain_*.csv"))
    if not paths:
        raise FileNotFoundError(f"no chain tables under {fit_dir}")
    return [pd.read_csv(p) for p in paths]


def fit_summary(tables, mass: float = 0.95) -> pd.DataFrame:
    """Pooled posterior summaries plus per-parameter R-hat across chains."""
    if not tables:
        raise ValueError("no chains to summarize")
    length = len(tables[0])
    if any(len(t) != length for t in tables):
        raise ValueError("chains have mismatched lengths")
    params = [c for c in tables[0].columns if c != "iteration"]
    rows = []
    for p in params:
        chains = [t[p].to_numpy(dtype=float) for t in tables]
        pooled = np.concatenate(chains)
        summ = summarize(p, pooled, mass)
        if len(tables) >= 2 and len(pooled) >= 8:
            try:
                rh = r_hat(chains)
            except diagnostics.DiagnosticsError:
                rh = float("nan")
        else:
            rh = float("nan")
        rows.append(
            {
                "parameter": p,
                "mean": summ.mean,
                "median": summ.median,
                "hdi_low": summ.hdi_low,
                "hdi_high": summ.hdi_high,
                "n_draws": summ.n_draws,
                "r_hat": rh,
            }
        )
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# study driver (replicated simulation plus fits)


def _rep_scenario(scenario: SimScenario, rep: int) -> SimScenario:
    return replace(scenario, seed=int(scenario.seed) + 7919 * int(rep))


def simulate_study(scenario: SimScenario, n_reps: int, out_dir) -> list:
    """Write n_reps replicate datasets under out_dir/rep_###/ plus a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep_dirs = []
    for rep in range(n_reps):
        sc = _rep_scenario(scenario, rep)
        cohort, truth = simgen.generate_cohort(sc)
        rep_dir = out_dir / f"rep_{rep:03d}"
        simgen.write_dataset(cohort, truth, rep_dir)
        rep_dirs.append(rep_dir)
    manifest = {
        "scenario": simgen._scenario_dict(scenario),
        "n_reps": n_reps,
        "replicates": [d.name for d in rep_dirs],
    }
    with open(out_dir / "scenario.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return rep_dirs


def _beta_estimate(tables) -> tuple:
    pooled = np.concatenate([t["beta"].to_numpy(dtype=float) for t in tables])
    if not np.isfinite(pooled).all():
        raise ValueError("non-finite beta draws")
    lo, hi = diagnostics.hdi(pooled, 0.95)
    rh = r_hat([t["beta"].to_numpy(dtype=float) for t in tables]) if len(tables) > 1 else float("nan")
    return float(pooled.mean()), lo, hi, rh


def run_study(
    scenario: SimScenario,
    config: SamplerConfig,
    n_reps: int,
    out_dir=None,
    *,
    modes=FIT_MODES,
    n_jobs: int | None = None,
    registry: dict | None = None,
    progress=None,
) -> dict:
    """Simulate n_reps datasets, fit each with the requested modes, and score.

    The corrected (and naive) fits use the misspecification-adjusted registry
    when the scenario carries flags; generation always uses the standard one.
    Replicates where any chain fails or emits non-finite draws are excluded
    from scoring and reported.
    """
    registry = registry or measurement.load_registry()
    fit_registry = simgen.apply_misspecification(scenario, registry)
    out_dir = Path(out_dir) if out_dir is not None else None
    estimates = {m: {} for m in modes}
    exclusions = {m: [] for m in modes}

    for rep in range(n_reps):
        sc = _rep_scenario(scenario, rep)
        cohort, truth = simgen.generate_cohort(sc, registry)
        rep_dir = None
        if out_dir is not None:
            rep_dir = out_dir / f"rep_{rep:03d}"
            simgen.write_dataset(cohort, truth, rep_dir)
        for mode in modes:
            fit_dir = rep_dir / f"fit_{mode}" if rep_dir is not None else None
            tables, errors = run_fit(
                cohort,
                fit_registry if mode == "corrected" else registry,
                config,
                fit_dir,
                mode=mode,
                truth_cells=truth.cells if mode == "true" else None,
                rng_stream=1000 + rep,
                n_jobs=n_jobs,
            )
            if errors or len(tables) < config.n_chains:
                exclusions[mode].append({"rep": rep, "errors": errors})
                continue
            try:
                estimates[mode][rep] = _beta_estimate(tables)
            except ValueError as exc:
                exclusions[mode].append({"rep": rep, "errors": [str(exc)]})
        if progress is not None:
            progress(rep)

    reports = {}
    for mode in modes:
        est = [v[:3] for v in estimates[mode].values()]
        if len(est) >= 2:
            reports[mode] = diagnostics.score_simulation(est, scenario.beta_true)
    result = {
        "scenario": simgen._scenario_dict(scenario),
        "n_reps": n_reps,
        "estimates": {
            m: {int(r): list(v) for r, v in estimates[m].items()} for m in modes
        },
        "exclusions": exclusions,
        "reports": {m: asdict(rep) for m, rep in reports.items()},
    }
    if out_dir is not None:
        write_study_report(result, out_dir)
    return result


def report_frame(result: dict) -> pd.DataFrame:
    """Bias/MSE/coverage table (one row per measure, one column pair per mode)."""
    rows = []
    for measure in ("absolute_bias", "relative_bias", "mse", "coverage"):
        row = {"measure": measure}
        for mode, rep in result["reports"].items():
            row[mode] = rep[measure]
            row[f"{mode}_se"] = rep[f"{measure}_se"] if measure != "relative_bias" else rep["relative_bias_se"]
        rows.append(row)
    return pd.DataFrame(rows)


def write_study_report(result: dict, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "report.json", "w") as fh:
        json.dump(result, fh, indent=1, sort_keys=True)
    if result["reports"]:
        report_frame(result).to_csv(
            out_dir / "report.csv", index=False, float_format="%.6g"
        )
    est_rows = []
    for mode, per_rep in result["estimates"].items():
        for rep, (mean, lo, hi, rh) in sorted(per_rep.items(), key=lambda kv: int(kv[0])):
            est_rows.append(
                {"mode": mode, "rep": int(rep), "beta_mean": mean,
                 "hdi_low": lo, "hdi_high": hi, "r_hat": rh}
            )
    if est_rows:
        pd.DataFrame(est_rows).to_csv(
            out_dir / "estimates.csv", index=False, float_format="%.10g"
        )


# ---------------------------------------------------------------------------
# config files


def load_config_file(path) -> dict:
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return raw


def sampler_config_from(raw: dict, **overrides) -> SamplerConfig:
    merged = dict(raw.get("sampler", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return SamplerConfig(**merged)


def scenario_from(raw: dict, **overrides) -> SimScenario:
    merged = dict(raw.get("scenario", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return simgen.scenario_from_dict(merged)
