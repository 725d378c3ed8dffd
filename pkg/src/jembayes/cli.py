"""Command line interface: simulate, fit, diagnose, summarize, plot-data."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import diagnostics, measurement, pipeline, plots, simgen
from .cohort import CohortData
from .pipeline import (
    fit_summary,
    load_config_file,
    load_fit,
    run_fit,
    sampler_config_from,
    scenario_from,
)


@click.group()
def main():
    """Bayesian exposure measurement-error correction for cohort survival data."""


def _load_raw_config(config_path):
    return load_config_file(config_path) if config_path else {}


@main.command()
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config with a 'scenario' section.")
@click.option("--out", "-o", "out_dir", type=click.Path(), required=True)
@click.option("--n-reps", type=int, default=1, show_default=True)
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--n-workers", type=int, default=None)
@click.option("--beta-true", type=float, default=None)
@click.option("--misspec", type=click.Choice(simgen.MISSPECIFICATION_FLAGS),
              multiple=True, help="Misspecification flag(s) recorded in the scenario.")
def simulate(config_path, out_dir, n_reps, seed, n_workers, beta_true, misspec):
    """Generate replicate synthetic cohorts with known truth."""
    raw = _load_raw_config(config_path)
    try:
        scenario = scenario_from(
            raw,
            seed=seed,
            n_workers=n_workers,
            beta_true=beta_true,
            misspecification=tuple(misspec) if misspec else None,
        )
        rep_dirs = pipeline.simulate_study(scenario, n_reps, out_dir)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc))
    click.echo(f"wrote {len(rep_dirs)} replicate dataset(s) under {out_dir}")


@main.command()
@click.option("--cohort", "cohort_dir", type=click.Path(exists=True), required=True,
              help="Directory with cells.csv and workers.csv.")
@click.option("--out", "-o", "out_dir", type=click.Path(), required=True)
@click.option("--config", "-c", "config_path", type=click.Path(exists=True), default=None,
              help="YAML config with a 'sampler' section.")
@click.option("--registry", "registry_path", type=click.Path(exists=True), default=None,
              help="Factor registry file (defaults to the shipped registry).")
@click.option("--naive", is_flag=True, help="Condition on observed exposures; no correction.")
@click.option("--true-exposure", "truth_path", type=click.Path(exists=True), default=None,
              help="truth.csv to condition on (reference fit).")
@click.option("--kind", type=click.Choice(["PH", "EHR"]), default=None)
@click.option("--chains", type=int, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--burnin", type=int, default=None)
@click.option("--thin", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--jobs", type=int, default=None, help="Concurrent chain processes.")
@click.option("--resume", is_flag=True, help="Resume from per-chain checkpoints.")
def fit(cohort_dir, out_dir, config_path, registry_path, naive, truth_path, kind,
        chains, iterations, burnin, thin, seed, jobs, resume):
    """Fit the hierarchical model to a cohort (corrected, naive or true-exposure)."""
    if naive and truth_path:
        raise click.UsageError("--naive and --true-exposure are mutually exclusive")
    raw = _load_raw_config(config_path)
    try:
        config = sampler_config_from(
            raw, n_chains=chains, iterations=iterations, burnin=burnin,
            thin=thin, seed=seed, disease_kind=kind,
        )
        cohort = CohortData.load(cohort_dir)
        registry = measurement.load_registry(registry_path)
    except (ValueError, TypeError) as exc:
        raise click.UsageError(str(exc))
    mode = "naive" if naive else ("true" if truth_path else "corrected")
    truth_cells = pd.read_csv(truth_path) if truth_path else None
    tables, errors = run_fit(
        cohort, registry, config, out_dir, mode=mode,
        truth_cells=truth_cells, n_jobs=jobs, resume=resume,
    )
    for err in errors:
        click.echo(f"error: {err}", err=True)
    click.echo(f"{len(tables)}/{config.n_chains} chains finished -> {out_dir}")
    if errors:
        sys.exit(1)


@main.command()
@click.option("--fit-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "-o", "out_path", type=click.Path(), default=None,
              help="Summary CSV path (default: <fit-dir>/summary.csv).")
@click.option("--mass", type=float, default=0.95, show_default=True)
def diagnose(fit_dir, out_path, mass):
    """Per-parameter R-hat and posterior summaries across the fit's chains."""
    try:
        tables = load_fit(fit_dir)
        summary = fit_summary(tables, mass)
    except (ValueError, FileNotFoundError) as exc:
        raise click.UsageError(str(exc))
    out_path = Path(out_path) if out_path else Path(fit_dir) / "summary.csv"
    summary.to_csv(out_path, index=False, float_format="%.10g")
    worst = summary["r_hat"].max()
    click.echo(summary.to_string(index=False, max_rows=40))
    click.echo(f"wrote {out_path} (max R-hat {worst:.4f})")
    if np.isfinite(worst) and worst >= 1.05:
        click.echo("warning: R-hat >= 1.05 flags non-convergence", err=True)


@main.command()
@click.option("--study-dir", type=click.Path(exists=True), required=True,
              help="Directory produced by a study run (report.json present).")
@click.option("--render/--no-render", default=True, show_default=True,
              help="Also render PNG figures next to the delimited output.")
def summarize(study_dir, render):
    """Simulation-batch report: bias, MSE and coverage per fit mode."""
    study_dir = Path(study_dir)
    report_path = study_dir / "report.json"
    if not report_path.exists():
        raise click.UsageError(f"no report.json under {study_dir}")
    with open(report_path) as fh:
        result = json.load(fh)
    if not result.get("reports"):
        raise click.UsageError("report.json holds no scored fits")
    frame = pipeline.report_frame(result)
    frame.to_csv(study_dir / "report.csv", index=False, float_format="%.6g")
    click.echo(frame.to_string(index=False))
    if render:
        fig_dir = study_dir / "figures"
        fig_dir.mkdir(exist_ok=True)
        estimates = {
            m: {int(r): v for r, v in per.items()}
            for m, per in result["estimates"].items()
        }
        beta_true = result["scenario"]["beta_true"]
        plots.render_estimates(estimates, beta_true, fig_dir / "estimates.png")
        rhats = [v[3] for per in estimates.values() for v in per.values()]
        if rhats:
            plots.render_rhat_hist(rhats, fig_dir / "rhat.png")
        click.echo(f"figures under {fig_dir}")


@main.command("plot-data")
@click.option("--fit-dir", type=click.Path(exists=True), required=True)
@click.option("--out", "-o", "out_dir", type=click.Path(), default=None,
              help="Output directory (default: <fit-dir>/plot_data).")
@click.option("--parameter", "-p", default="beta", show_default=True)
@click.option("--render/--no-render", default=True, show_default=True,
              help="Also render PNG figures next to the delimited output.")
def plot_data(fit_dir, out_dir, parameter, render):
    """Violin/trace coordinates as delimited text (plus rendered figures)."""
    try:
        tables = load_fit(fit_dir)
    except FileNotFoundError as exc:
        raise click.UsageError(str(exc))
    if parameter not in tables[0].columns:
        raise click.UsageError(f"parameter {parameter!r} not in the sample tables")
    out_dir = Path(out_dir) if out_dir else Path(fit_dir) / "plot_data"
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_rows = []
    for k, t in enumerate(tables):
        for i, v in enumerate(t[parameter].to_numpy(dtype=float)):
            trace_rows.append({"chain": k, "draw": i, "value": v})
    trace = pd.DataFrame(trace_rows)
    trace.to_csv(out_dir / f"trace_{parameter}.csv", index=False, float_format="%.10g")
    pooled = np.concatenate([t[parameter].to_numpy(dtype=float) for t in tables])
    qs = np.linspace(0.0, 1.0, 201)
    violin = pd.DataFrame({"quantile": qs, "value": np.quantile(pooled, qs)})
    violin.to_csv(out_dir / f"violin_{parameter}.csv", index=False, float_format="%.10g")
    click.echo(f"wrote plot data under {out_dir}")
    if render:
        chains = [t[parameter].to_numpy(dtype=float) for t in tables]
        plots.render_trace(chains, parameter, out_dir / f"trace_{parameter}.png")
        plots.render_violin({parameter: pooled}, out_dir / f"violin_{parameter}.png",
                            ylabel=parameter)
        click.echo(f"rendered figures under {out_dir}")


if __name__ == "__main__":
    main()
