"""Component-wise Metropolis-Hastings engine for the hierarchical model.

Update order per iteration (fixed for reproducibility): beta, lambda_1..4,
then per measurement model (M1a, M2, M2_Expert, M3, M4) each factor block,
then each block's hyperparameters. Disease-parameter updates condition on the
cumulative exposure; factor updates propose the shared level values together
with the block's Berkson errors (one MH ratio), derive the implied classical
errors by inversion, rescale the annual exposures of the model's cells
multiplicatively (additively structured for the two-term model), recumulate
through the per-worker prefix structure, and evaluate only the affected part
of the survival likelihood. All ratio terms are summed in log space; nothing
is exponentiated before summation.

Adaptive phases tune one step size per scalar disease parameter and per
factor-block component class toward a target acceptance rate, then freeze.
Chains are independent sequential workers: chain k of a run with seed s draws
from a generator seeded with (s, replicate-stream, k), so results are
deterministic regardless of scheduling.
"""

from __future__ import annotations

import math
import os
import pickle
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.special import betaln as betaln_scalar
from scipy.special import log_ndtr

from . import dist
from .cohort import CohortData
from .disease import (
    BASELINE_GAMMA_PRIORS,
    BETA_PRIOR_SD,
    BREAKPOINTS,
    BaselineHazard,
    DiseaseParams,
)
from .measurement import (
    MODEL_FACTORS,
    FactorBlock,
    build_layouts,
    init_block,
    log_measurement_density,
    reconstruct_cells,
)

MODEL_UPDATE_ORDER = ("M1a", "M2", "M2_Expert", "M3", "M4")
_LIKELIHOOD_REFRESH = 512  # kill delta-accumulation drift in the caches


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 20000
    burnin: int = 2000
    thin: int = 10
    n_adapt_phases: int = 40
    adapt_phase_len: int = 50
    n_chains: int = 4
    seed: int = 0
    disease_kind: str = "PH"
    exposure_unit_wlm: float = 100.0
    target_accept: float = 0.44
    adapt_gain: float = 1.5
    checkpoint_every: int = 5000
    debug_check_every: int = 0
    track_factor_means: bool = True

    def __post_init__(self):
        for name in ("iterations", "burnin", "thin", "n_adapt_phases",
                     "adapt_phase_len", "n_chains", "checkpoint_every"):
            if getattr(self, name) < 0 or (name not in ("burnin", "n_adapt_phases") and getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")
        if self.burnin >= self.iterations:
            raise ValueError("burnin must be smaller than iterations")
        if (self.iterations - self.burnin) % self.thin != 0:
            raise ValueError("thin must divide the retained range (iterations - burnin)")
        if self.disease_kind not in ("PH", "EHR"):
            raise ValueError("disease_kind must be PH or EHR")

    @property
    def n_retained(self) -> int:
        return (self.iterations - self.burnin) // self.thin

    @property
    def adapt_iterations(self) -> int:
        return self.n_adapt_phases * self.adapt_phase_len


def mh_accept(rng: np.random.Generator, log_ratio: float) -> bool:
    """Standard Metropolis-Hastings accept decision in log space."""
    if not log_ratio < 0.0:  # covers log_ratio >= 0; NaN falls through to reject
        return not math.isnan(log_ratio)
    if log_ratio == -math.inf:
        return False
    return math.log(rng.uniform()) < log_ratio


@dataclass
class _ScaleEntry:
    scale: float
    accepts: float = 0.0
    attempts: float = 0.0


class ProposalScales:
    """One positive step size per update class, with acceptance counters."""

    def __init__(self, target: float = 0.44, gain: float = 1.5):
        self.target = target
        self.gain = gain
        self.entries: dict = {}
        self.frozen = False

    def ensure(self, name: str, init: float) -> None:
        if name not in self.entries:
            if init <= 0.0:
                raise ValueError(f"scale for {name} must be > 0")
            self.entries[name] = _ScaleEntry(scale=float(init))

    def __getitem__(self, name: str) -> float:
        return self.entries[name].scale

    def record(self, name: str, accepted: float, attempts: float = 1.0) -> None:
        e = self.entries[name]
        e.accepts += accepted
        e.attempts += attempts

    def adapt_phase(self) -> None:
        if self.frozen:
            return
        for e in self.entries.values():
            if e.attempts > 0:
                rate = e.accepts / e.attempts
                e.scale *= math.exp(self.gain * (rate - self.target))
                e.scale = min(max(e.scale, 1e-10), 1e8)
            e.accepts = 0.0
            e.attempts = 0.0

    def freeze(self) -> None:
        self.frozen = True
        for e in self.entries.values():
            e.accepts = 0.0
            e.attempts = 0.0

    def rates(self) -> dict:
        return {
            k: (e.accepts / e.attempts if e.attempts else math.nan)
            for k, e in self.entries.items()
        }

    def snapshot(self) -> dict:
        return {
            "frozen": self.frozen,
            "entries": {k: (e.scale, e.accepts, e.attempts) for k, e in self.entries.items()},
        }

    def restore(self, snap: dict) -> None:
        self.frozen = snap["frozen"]
        self.entries = {
            k: _ScaleEntry(scale=v[0], accepts=v[1], attempts=v[2])
            for k, v in snap["entries"].items()
        }


# ---------------------------------------------------------------------------
# survival likelihood grid


class _SurvivalGrid:
    """Vectorized segment decomposition of the left-truncated likelihood.

    The follow-up of each worker is split at baseline break points and
    exposure-year boundaries; segment s carries (duration, baseline interval,
    pointer into the global cumulative-exposure vector). Pointer N (one past
    the end) is a sentinel reading 0 exposure.
    """

    def __init__(self, cohort: CohortData, unit: float):
        workers = cohort.workers
        cells = cohort.cells
        self.unit = float(unit)
        self.n_cells = len(cells)
        self.block_sizes = cohort.block_sizes()
        self.worker_of_cell = cohort.worker_of_cell()
        age_end = cohort.age_end()

        starts = np.concatenate(([0], np.cumsum(self.block_sizes))).astype(np.int64)
        bp_inner = np.asarray(BREAKPOINTS[1:-1])
        s_max = BREAKPOINTS[-1]

        seg_dur, seg_k, seg_ptr, seg_worker = [], [], [], []
        ev_k, ev_ptr, ev_worker = [], [], []
        self.worker_seg_range = np.zeros((len(workers), 2), dtype=np.int64)
        self.worker_ev = np.full(len(workers), -1, dtype=np.int64)

        entry = workers["entry_age"].to_numpy(dtype=float)
        exitv = workers["exit_age"].to_numpy(dtype=float)
        event = workers["event"].to_numpy(dtype=int)
        for i in range(len(workers)):
            e, y = entry[i], exitv[i]
            if not 0.0 <= e < y <= s_max:
                raise SamplerError(
                    f"worker row {i}: follow-up [{e}, {y}] outside (0, {s_max}]"
                )
            c0, c1 = starts[i], starts[i + 1]
            jumps = age_end[c0:c1]
            cuts = [e, y]
            cuts.extend(b for b in bp_inner if e < b < y)
            cuts.extend(j for j in jumps if e < j < y)
            edges = sorted(set(cuts))
            first = len(seg_dur)
            for lo, hi in zip(edges[:-1], edges[1:]):
                mid = 0.5 * (lo + hi)
                k = int(np.searchsorted(BREAKPOINTS, mid, side="left")) - 1
                pos = int(np.searchsorted(jumps, lo, side="right"))
                ptr = int(c0 + pos - 1) if pos > 0 else -1
                seg_dur.append(hi - lo)
                seg_k.append(k)
                seg_ptr.append(ptr)
                seg_worker.append(i)
            self.worker_seg_range[i] = (first, len(seg_dur))
            if event[i]:
                k = int(np.searchsorted(BREAKPOINTS, y, side="left")) - 1
                pos = int(np.searchsorted(jumps, y, side="right"))
                ptr = int(c0 + pos - 1) if pos > 0 else -1
                self.worker_ev[i] = len(ev_k)
                ev_k.append(k)
                ev_ptr.append(ptr)
                ev_worker.append(i)

        sentinel = self.n_cells
        self.seg_dur = np.asarray(seg_dur)
        self.seg_k = np.asarray(seg_k, dtype=np.int64)
        self.seg_ptr = np.where(
            np.asarray(seg_ptr, dtype=np.int64) < 0, sentinel, np.asarray(seg_ptr, dtype=np.int64)
        )
        self.seg_worker = np.asarray(seg_worker, dtype=np.int64)
        self.ev_k = np.asarray(ev_k, dtype=np.int64)
        self.ev_ptr = np.where(
            np.asarray(ev_ptr, dtype=np.int64) < 0, sentinel, np.asarray(ev_ptr, dtype=np.int64)
        )
        self.ev_worker = np.asarray(ev_worker, dtype=np.int64)
        self.n_ev_k = np.bincount(self.ev_k, minlength=4).astype(float)
        self.n_seg = len(self.seg_dur)
        self.n_ev = len(self.ev_k)
        # per-worker prefix-sum bases: cum[i] = csum[i] - csum[start(w)-1]
        self.cum_base_idx = np.maximum(starts[:-1] - 1, 0)
        self.cum_base_zero = starts[:-1] == 0

    def affected(self, cell_rows: np.ndarray):
        """Segment and event indices of every worker owning one of `cell_rows`."""
        wset = np.unique(self.worker_of_cell[cell_rows])
        seg_idx = np.concatenate(
            [np.arange(self.worker_seg_range[w, 0], self.worker_seg_range[w, 1]) for w in wset]
        ).astype(np.int64) if len(wset) else np.zeros(0, dtype=np.int64)
        evs = self.worker_ev[wset]
        ev_idx = evs[evs >= 0].astype(np.int64)
        return seg_idx, ev_idx


@dataclass(frozen=True)
class _ModelCtx:
    """Static per-measurement-model arrays used by factor updates."""

    tag: str
    rows: np.ndarray
    l: np.ndarray
    tau: np.ndarray
    aux_r: np.ndarray | None
    aux_a: np.ndarray | None
    aux_a_ref: np.ndarray | None
    seg_idx: np.ndarray
    seg_ptr: np.ndarray
    seg_dur: np.ndarray
    seg_k: np.ndarray
    ev_idx: np.ndarray
    ev_ptr: np.ndarray


@dataclass(frozen=True)
class _BlockCtx:
    """Static per-(model, factor) sampler constants."""

    tag: str
    name: str
    level_unit: float
    berkson_unit: float
    log_w: np.ndarray | None  # log observed (multiplicative classical only)
    act_idx: np.ndarray  # indices of Berkson groups with an active error
    cls_of_act: np.ndarray  # classical parent of each active Berkson group
    log_tau_act: np.ndarray  # log transfer factor of each active group


class FitContext:
    """Immutable per-fit precomputation shared read-only by all chains."""

    def __init__(self, cohort: CohortData, registry: dict, config: SamplerConfig,
                 mode: str = "corrected", truth_annual: np.ndarray | None = None):
        if mode not in ("corrected", "naive", "true"):
            raise ValueError(f"unknown fit mode {mode!r}")
        self.config = config
        self.mode = mode
        self.cohort = cohort
        self.registry = registry
        self.grid = _SurvivalGrid(cohort, config.exposure_unit_wlm)
        cells = cohort.cells
        self.observed_annual = cells["observed_exposure"].to_numpy(dtype=float)
        if mode == "true":
            if truth_annual is None:
                raise ValueError("true-exposure mode needs truth_annual")
            if len(truth_annual) != len(cells):
                raise ValueError("truth_annual length does not match the cohort cells")
            self.fixed_annual = np.asarray(truth_annual, dtype=float)
        elif mode == "naive":
            self.fixed_annual = self.observed_annual
        else:
            self.fixed_annual = None

        self.layouts = {}
        self.model_ctx = {}
        self.block_ctx = {}
        self.tags = ()
        if mode == "corrected":
            self.layouts = build_layouts(cohort, registry)
            tags = [t for t in MODEL_UPDATE_ORDER if any(k[0] == t for k in self.layouts)]
            self.tags = tuple(tags)
            for tag in tags:
                mask = (cells["model_tag"] == tag).to_numpy()
                rows = np.flatnonzero(mask).astype(np.int64)
                frame = cells.loc[mask]
                seg_idx, ev_idx = self.grid.affected(rows)
                self.model_ctx[tag] = _ModelCtx(
                    tag=tag,
                    rows=rows,
                    l=frame["time_fraction"].to_numpy(dtype=float),
                    tau=frame["transfer_factor"].to_numpy(dtype=float),
                    aux_r=frame["aux_r"].to_numpy(dtype=float) if tag == "M1a" else None,
                    aux_a=frame["aux_a"].to_numpy(dtype=float) if tag == "M1a" else None,
                    aux_a_ref=frame["aux_a_ref"].to_numpy(dtype=float) if tag == "M1a" else None,
                    seg_idx=seg_idx,
                    seg_ptr=self.grid.seg_ptr[seg_idx],
                    seg_dur=self.grid.seg_dur[seg_idx],
                    seg_k=self.grid.seg_k[seg_idx],
                    ev_idx=ev_idx,
                    ev_ptr=self.grid.ev_ptr[ev_idx],
                )
                for name in MODEL_FACTORS[tag]:
                    layout = self.layouts[(tag, name)]
                    spec = layout.spec
                    if spec.classical.family == "multiplicative_lognormal":
                        level_unit = min(max(spec.classical.sd, 0.01), 1.0)
                        log_w = np.log(np.maximum(layout.w_obs, 1e-300))
                        if np.any(layout.w_obs <= 0):
                            raise SamplerError(
                                f"{tag}/{name}: non-positive observed value under a "
                                "multiplicative classical error"
                            )
                    else:
                        if spec.exposure.has_hyper and spec.exposure.mu_prior:
                            ref = max(abs(spec.exposure.mu_prior[0]), 1e-6)
                        elif spec.exposure.fixed and "mu" in spec.exposure.fixed:
                            ref = max(abs(spec.exposure.fixed["mu"]), 1e-6)
                        else:
                            ref = 1.0
                        level_unit = min(max(spec.classical.sd / ref, 0.01), 1.0)
                        log_w = None
                    berkson_unit = min(max(spec.berkson.sd, 0.01), 1.0) if spec.berkson.active else 0.0
                    act_idx = np.flatnonzero(layout.active_brk).astype(np.int64)
                    self.block_ctx[(tag, name)] = _BlockCtx(
                        tag=tag, name=name, level_unit=level_unit,
                        berkson_unit=berkson_unit, log_w=log_w,
                        act_idx=act_idx,
                        cls_of_act=layout.index.cls_of_brk[act_idx].astype(np.int64),
                        log_tau_act=np.log(layout.tau_brk[act_idx]),
                    )

    def reconstruct_tag(self, tag: str, blocks: dict) -> np.ndarray:
        """Annual exposure of one model's cells from current block states."""
        mctx = self.model_ctx[tag]
        values = {
            name: blocks[(tag, name)].cell_values() for name in MODEL_FACTORS[tag]
        }
        frame = self.cohort.cells.loc[mctx.rows]
        return reconstruct_cells(tag, frame, values)


# ---------------------------------------------------------------------------
# chain state


class ChainState:
    """All parameters, latent blocks and coherent caches of one chain."""

    def __init__(self, ctx: FitContext, chain_index: int, rng_keys=(0,)):
        self.ctx = ctx
        self.config = ctx.config
        self.chain_index = chain_index
        self.rng = np.random.default_rng(list(rng_keys) + [int(chain_index)])
        self.kind = ctx.config.disease_kind
        self.beta = 0.0
        self.lam = np.array([a * s for a, s in BASELINE_GAMMA_PRIORS])
        self.scales = ProposalScales(
            target=ctx.config.target_accept, gain=ctx.config.adapt_gain
        )
        self.scales.ensure("beta", 0.1)
        for k in range(4):
            shape, scale = BASELINE_GAMMA_PRIORS[k]
            self.scales.ensure(f"lambda_{k + 1}", 0.5 * math.sqrt(shape) * scale)

        self.blocks: dict = {}
        self._log_level: dict = {}
        self._block_stats: dict = {}  # lazy level sufficient statistics
        n = ctx.grid.n_cells
        if ctx.mode == "corrected":
            for key, layout in ctx.layouts.items():
                block = init_block(layout)
                self.blocks[key] = block
                self._log_level[key] = np.log(block.level)
                tag, name = key
                d = layout.n_classical + int(layout.active_brk.sum())
                self.scales.ensure(f"{tag}.{name}", 2.4 / math.sqrt(max(d, 1)))
                expo = layout.spec.exposure
                if expo.has_hyper:
                    if expo.family == "truncated_normal_positive":
                        self.scales.ensure(f"{tag}.{name}.mu", 0.5 * expo.sigma_prior[0] + 0.1)
                        self.scales.ensure(f"{tag}.{name}.sigma", 0.3)
                    else:
                        self.scales.ensure(f"{tag}.{name}.a", 0.5)
                        self.scales.ensure(f"{tag}.{name}.b", 0.5)
            self.annual = np.zeros(n)
            for tag in ctx.tags:
                self.annual[ctx.model_ctx[tag].rows] = ctx.reconstruct_tag(tag, self.blocks)
            if "M1a" in ctx.tags:
                self._init_m1a_terms()
        else:
            self.annual = ctx.fixed_annual.copy()

        # exposure caches: cum has a sentinel 0.0 slot at index n
        self.cum = np.zeros(n + 1)
        self._cum_scratch = np.zeros(n + 1)
        self._refresh_cum()
        self._refresh_likelihood()
        self._iter = 0

    # -- caches ------------------------------------------------------------

    def _init_m1a_terms(self):
        ctx = self.ctx
        mctx = ctx.model_ctx["M1a"]
        v = {n: self.blocks[("M1a", n)].cell_values() for n in MODEL_FACTORS["M1a"]}
        self.m1a_t1 = v["c_rn_1937"] * v["b"]
        self.m1a_t2 = mctx.aux_r * (v["c_rn_ref"] / mctx.aux_a_ref) * v["tau_e"] * mctx.aux_a
        self.m1a_com = (
            v["gamma"] * v["omega"] * v["phi"] * 12.0 * mctx.l * mctx.tau
        )

    def _refresh_cum(self):
        grid = self.ctx.grid
        n = grid.n_cells
        c = np.cumsum(self.annual)
        base = c[grid.cum_base_idx]
        base[grid.cum_base_zero] = 0.0
        self.cum[:n] = c - base[grid.worker_of_cell]
        self.cum[n] = 0.0

    def _link_seg(self, beta: float, xseg: np.ndarray) -> np.ndarray:
        if self.kind == "PH":
            return np.exp(beta * xseg)
        return 1.0 + beta * xseg

    def _refresh_likelihood(self):
        grid = self.ctx.grid
        inv = 1.0 / grid.unit
        self.xseg = self.cum[grid.seg_ptr] * inv
        self.xev = self.cum[grid.ev_ptr] * inv
        link = self._link_seg(self.beta, self.xseg)
        if self.kind == "EHR" and (np.any(link <= 0.0) or np.any(1.0 + self.beta * self.xev <= 0.0)):
            self.de = grid.seg_dur * np.maximum(link, 0.0)
            self.loglik = -np.inf
            self.G = np.bincount(grid.seg_k, weights=self.de, minlength=4)
            self.ev_link = np.zeros(grid.n_ev)
            self.ev_link_sum = -np.inf
            self.ev_loglam = float(grid.n_ev_k @ np.log(self.lam))
            return
        self.de = grid.seg_dur * link
        self.G = np.bincount(grid.seg_k, weights=self.de, minlength=4)
        if self.kind == "PH":
            self.ev_link = self.beta * self.xev
        else:
            self.ev_link = np.log1p(self.beta * self.xev)
        self.ev_link_sum = float(self.ev_link.sum())
        self.ev_loglam = float(grid.n_ev_k @ np.log(self.lam))
        self.loglik = self.ev_loglam + self.ev_link_sum - float(self.lam @ self.G)

    def log_likelihood(self) -> float:
        return self.loglik

    def log_posterior(self) -> float:
        """Full log posterior (likelihood + priors + measurement terms)."""
        total = self.loglik
        total += float(dist.norm_logpdf(self.beta, 0.0, BETA_PRIOR_SD))
        for k in range(4):
            shape, scale = BASELINE_GAMMA_PRIORS[k]
            total += float(dist.gamma_logpdf(self.lam[k], shape, scale))
        for block in self.blocks.values():
            total += log_measurement_density(block)
        return total

    def disease_params(self) -> DiseaseParams:
        return DiseaseParams(
            beta=self.beta, baseline=BaselineHazard(rates=tuple(self.lam)), kind=self.kind
        )

    def check_coherence(self, tol: float = 1e-10) -> float:
        """Max relative drift of the annual/cumulative caches vs full recompute."""
        ctx = self.ctx
        grid = ctx.grid
        worst = 0.0
        if ctx.mode == "corrected":
            fresh = np.zeros(grid.n_cells)
            for tag in ctx.tags:
                fresh[ctx.model_ctx[tag].rows] = ctx.reconstruct_tag(tag, self.blocks)
            scale = np.maximum(np.abs(fresh), 1e-12)
            worst = float(np.max(np.abs(fresh - self.annual) / scale, initial=0.0))
        c = np.cumsum(self.annual)
        base = c[grid.cum_base_idx]
        base[grid.cum_base_zero] = 0.0
        cum = c - base[grid.worker_of_cell]
        scale = np.maximum(np.abs(cum), 1e-12)
        worst = max(worst, float(np.max(np.abs(cum - self.cum[: grid.n_cells]) / scale, initial=0.0)))
        if worst > tol:
            raise SamplerError(f"cache coherence violated: relative drift {worst:.3e}")
        return worst

    def resync(self):
        """Recompute all caches from the latent state (exact)."""
        ctx = self.ctx
        self._block_stats = {}
        if ctx.mode == "corrected":
            for tag in ctx.tags:
                ctx_rows = ctx.model_ctx[tag].rows
                self.annual[ctx_rows] = ctx.reconstruct_tag(tag, self.blocks)
            if "M1a" in ctx.tags:
                self._init_m1a_terms()
        self._refresh_cum()
        self._refresh_likelihood()


# ---------------------------------------------------------------------------
# update steps


def _beta_logprior(beta: float) -> float:
    return -0.5 * (beta / BETA_PRIOR_SD) ** 2


def update_disease_param(state: ChainState, which: str, proposal: float | None = None) -> bool:
    """One MH step on beta or lambda_k, conditioning on cumulative exposure."""
    grid = state.ctx.grid
    if which == "beta":
        s = state.scales["beta"]
        beta_new = float(proposal) if proposal is not None else float(
            state.rng.normal(state.beta, s)
        )
        if state.kind == "PH":
            link = np.exp(beta_new * state.xseg)
            ev_link_new = beta_new * state.xev
            ok = True
        else:
            link = 1.0 + beta_new * state.xseg
            ev_arg = 1.0 + beta_new * state.xev
            ok = bool(np.all(link > 0.0) and np.all(ev_arg > 0.0))
            ev_link_new = np.log1p(beta_new * state.xev) if ok else None
        if ok:
            de_new = grid.seg_dur * link
            G_new = np.bincount(grid.seg_k, weights=de_new, minlength=4)
            ll_new = state.ev_loglam + float(ev_link_new.sum()) - float(state.lam @ G_new)
            ratio = ll_new - state.loglik + _beta_logprior(beta_new) - _beta_logprior(state.beta)
        else:
            ratio = -math.inf
        accepted = mh_accept(state.rng, ratio)
        if accepted:
            state.beta = beta_new
            state.de = de_new
            state.G = G_new
            state.ev_link = ev_link_new
            state.ev_link_sum = float(ev_link_new.sum())
            state.loglik = ll_new
        state.scales.record("beta", float(accepted))
        return accepted

    k = int(which.split("_")[1]) - 1
    name = f"lambda_{k + 1}"
    s = state.scales[name]
    lam_old = float(state.lam[k])
    lam_new = float(proposal) if proposal is not None else float(
        dist.sample_truncnorm_pos(state.rng, lam_old, s)
    )
    shape, scale = BASELINE_GAMMA_PRIORS[k]
    if lam_new <= 0.0:
        ratio = -math.inf
    else:
        d_ev = grid.n_ev_k[k] * (math.log(lam_new) - math.log(lam_old))
        d_int = (lam_new - lam_old) * float(state.G[k])
        d_prior = float(dist.gamma_logpdf(lam_new, shape, scale)) - float(
            dist.gamma_logpdf(lam_old, shape, scale)
        )
        # truncated-Gaussian proposal normalization correction
        d_q = float(log_ndtr(lam_old / s) - log_ndtr(lam_new / s))
        ratio = d_ev - d_int + d_prior + d_q
    accepted = mh_accept(state.rng, ratio)
    if accepted:
        state.lam[k] = lam_new
        state.ev_loglam += d_ev
        state.loglik += d_ev - d_int
    state.scales.record(name, float(accepted))
    return accepted


def _classical_logpdf_delta(spec, w, log_w, level_old, level_new,
                            llevel_old, llevel_new) -> float:
    fam = spec.classical.family
    if fam == "multiplicative_lognormal":
        sd = spec.classical.sd
        c = 0.5 * sd * sd
        t_new = log_w - llevel_new + c
        t_old = log_w - llevel_old + c
        return float((t_old @ t_old - t_new @ t_new) / (2.0 * sd * sd))
    if fam == "additive_normal":
        sd = spec.classical.sd
        d_new = w - level_new
        d_old = w - level_old
        return float((d_old @ d_old - d_new @ d_new) / (2.0 * sd * sd))
    return 0.0


def _exposure_logpdf_delta(block: FactorBlock, level_old, level_new) -> float:
    spec = block.layout.spec
    expo = spec.exposure
    if expo.family == "scaled_beta":
        lo, up = expo.bounds
        if np.any(level_new <= lo) or np.any(level_new >= up):
            return -math.inf
        if expo.has_hyper:
            a, b = block.hyper["a"], block.hyper["b"]
        else:
            a, b = expo.fixed["a"], expo.fixed["b"]
        z_new = (level_new - lo) / (up - lo)
        z_old = (level_old - lo) / (up - lo)
        return float(
            (a - 1.0) * (np.log(z_new / z_old).sum())
            + (b - 1.0) * (np.log((1.0 - z_new) / (1.0 - z_old)).sum())
        )
    if expo.has_hyper:
        mu = block.hyper["mu"][block.layout.year_idx]
        sigma = block.hyper["sigma"][block.layout.year_idx]
    else:
        mu, sigma = expo.fixed["mu"], expo.fixed["sigma"]
    d_new = (level_new - mu) / sigma
    d_old = (level_old - mu) / sigma
    return float(0.5 * ((d_old @ d_old) - (d_new @ d_new)))


def update_factor(state: ChainState, tag: str, name: str,
                  eps: np.ndarray | None = None, eta: np.ndarray | None = None) -> bool:
    """Joint MH update of one factor block's levels and Berkson errors.

    Levels move by a log-normal random walk on the classical domain; the
    implied classical errors follow by inversion. Berkson errors (where
    active) move by a log-normal random walk; new true values are the mapped
    levels times the Berkson errors times the transfer factor. The annual
    exposures of the model's cells are rescaled in place and recumulated, and
    only the affected workers' likelihood terms are re-evaluated.
    """
    ctx = state.ctx
    key = (tag, name)
    block = state.blocks[key]
    layout = block.layout
    spec = layout.spec
    bctx = ctx.block_ctx[key]
    mctx = ctx.model_ctx[tag]
    grid = ctx.grid
    sname = f"{tag}.{name}"
    s = state.scales[sname]

    level_old = block.level
    llevel_old = state._log_level[key]
    if eps is None:
        eps = state.rng.normal(0.0, s * bctx.level_unit, layout.n_classical)
    llevel_new = llevel_old + eps
    level_new = np.exp(llevel_new)

    act_idx = bctx.act_idx
    n_act = act_idx.shape[0]
    true_old = block.true_values
    cls_of_brk = layout.index.cls_of_brk
    true_new = level_new[cls_of_brk] * layout.tau_brk
    if n_act:
        if eta is None:
            eta = state.rng.normal(0.0, s * bctx.berkson_unit, n_act)
        true_new[act_idx] = true_old[act_idx] * np.exp(eps[bctx.cls_of_act] + eta)

    # measurement / exposure-model / proposal terms; the -log(true) part of
    # the Berkson density cancels against the log-normal walk Jacobian
    ratio = _classical_logpdf_delta(
        spec, layout.w_obs, bctx.log_w, level_old, level_new, llevel_old, llevel_new
    )
    ratio += _exposure_logpdf_delta(block, level_old, level_new)
    ratio += float(eps.sum())  # level-walk Jacobian
    if n_act:
        sd = spec.berkson.sd
        c = 0.5 * sd * sd
        lt_old = np.log(true_old[act_idx])
        t_old = lt_old - (llevel_old[bctx.cls_of_act] + bctx.log_tau_act) + c
        t_new = t_old + eta  # log true* - log base* = (log true - log base) + eta
        ratio += float((t_old @ t_old - t_new @ t_new) / (2.0 * sd * sd))

    if ratio == -math.inf:
        state.scales.record(sname, 0.0)
        return False

    # exposure rescale on this model's cells
    rows = mctx.rows
    ratio_cell = (true_new / true_old)[layout.index.brk_of_cell]
    annual_old_slice = state.annual[rows].copy()
    if tag == "M1a" and spec.role != "scale":
        if spec.role == "term1":
            t1_new = state.m1a_t1 * ratio_cell
            annual_new = (t1_new + state.m1a_t2) * state.m1a_com
        else:
            t2_new = state.m1a_t2 * ratio_cell
            annual_new = (state.m1a_t1 + t2_new) * state.m1a_com
    else:
        annual_new = annual_old_slice * ratio_cell
    state.annual[rows] = annual_new

    # recumulate and evaluate the affected likelihood slice
    n = grid.n_cells
    c = np.cumsum(state.annual)
    base = c[grid.cum_base_idx]
    base[grid.cum_base_zero] = 0.0
    cum_new = state._cum_scratch
    cum_new[:n] = c - base[grid.worker_of_cell]
    cum_new[n] = 0.0

    inv = 1.0 / grid.unit
    xseg_new = cum_new[mctx.seg_ptr] * inv
    if state.kind == "PH":
        link = np.exp(state.beta * xseg_new)
        de_new = mctx.seg_dur * link
        xev_new = cum_new[mctx.ev_ptr] * inv
        ev_link_new = state.beta * xev_new
        ok = True
    else:
        link = 1.0 + state.beta * xseg_new
        xev_new = cum_new[mctx.ev_ptr] * inv
        ev_arg = 1.0 + state.beta * xev_new
        ok = bool(np.all(link > 0.0) and np.all(ev_arg > 0.0))
        if ok:
            de_new = mctx.seg_dur * link
            ev_link_new = np.log1p(state.beta * xev_new)
    if ok:
        dG = np.bincount(mctx.seg_k, weights=de_new - state.de[mctx.seg_idx], minlength=4)
        d_ev = float(ev_link_new.sum() - state.ev_link[mctx.ev_idx].sum())
        d_ll = d_ev - float(state.lam @ dG)
        ratio += d_ll
    else:
        ratio = -math.inf

    accepted = mh_accept(state.rng, ratio)
    if accepted:
        block.level = level_new
        state._log_level[key] = llevel_new
        block.true_values = true_new
        state._block_stats[key] = None
        if tag == "M1a":
            if spec.role == "term1":
                state.m1a_t1 = t1_new
            elif spec.role == "term2":
                state.m1a_t2 = t2_new
            else:
                state.m1a_com = state.m1a_com * ratio_cell
        state.cum, state._cum_scratch = cum_new, state.cum
        state.xseg[mctx.seg_idx] = xseg_new
        state.xev[mctx.ev_idx] = xev_new
        state.de[mctx.seg_idx] = de_new
        state.G = state.G + dG
        state.ev_link[mctx.ev_idx] = ev_link_new
        state.ev_link_sum += d_ev
        state.loglik += d_ll
    else:
        state.annual[rows] = annual_old_slice
    state.scales.record(sname, float(accepted))
    return accepted


def _level_stats(state: ChainState, key) -> tuple:
    """Sufficient statistics of a block's levels for its exposure model."""
    stats = state._block_stats.get(key)
    if stats is None:
        block = state.blocks[key]
        layout = block.layout
        expo = layout.spec.exposure
        if expo.family == "scaled_beta":
            lo, up = expo.bounds
            z = (block.level - lo) / (up - lo)
            stats = (float(np.log(z).sum()), float(np.log1p(-z).sum()))
        else:
            T = len(layout.years)
            yi = layout.year_idx
            lvl = block.level
            stats = (
                np.bincount(yi, minlength=T).astype(float),
                np.bincount(yi, weights=lvl, minlength=T),
                np.bincount(yi, weights=lvl * lvl, minlength=T),
            )
        state._block_stats[key] = stats
    return stats


def update_hyper(state: ChainState, tag: str, name: str, which: str):
    """MH update of a block's hyperparameters, conditioning on its levels.

    which: "mu" or "sigma" (one-coordinate updates run for every calendar
    year in one vectorized pass, with independent accept decisions; valid
    because the conditional target factorizes over years) or "a"/"b"
    (scalars). Returns the acceptance indicator(s).
    """
    key = (tag, name)
    block = state.blocks[key]
    layout = block.layout
    expo = layout.spec.exposure
    if not expo.has_hyper:
        raise SamplerError(f"{tag}/{name} has fixed exposure parameters")
    rng = state.rng

    if which in ("mu", "sigma"):
        sname = f"{tag}.{name}.{which}"
        s = state.scales[sname]
        mu, sigma = block.hyper["mu"], block.hyper["sigma"]
        T = len(layout.years)
        n_t, s1, s2 = _level_stats(state, key)
        # positive-normal level term per year:
        #   -(s2 - 2 mu s1 + n mu^2) / (2 sigma^2) - n log sigma - n log Phi(mu/sigma)
        if which == "mu":
            mu_new = mu + rng.normal(0.0, s, T)
            d_level = (
                (2.0 * s1 * (mu_new - mu) - n_t * (mu_new**2 - mu**2))
                / (2.0 * sigma**2)
                - n_t * (log_ndtr(mu_new / sigma) - log_ndtr(mu / sigma))
            )
            m0, s0 = expo.mu_prior
            log_ratio = d_level - ((mu_new - m0) ** 2 - (mu - m0) ** 2) / (2.0 * s0 * s0)
        else:
            zeta = rng.normal(0.0, s, T)
            sig_new = sigma * np.exp(zeta)
            quad = s2 - 2.0 * mu * s1 + n_t * mu**2
            d_level = (
                -quad * (0.5 / sig_new**2 - 0.5 / sigma**2)
                - n_t * zeta
                - n_t * (log_ndtr(mu / sig_new) - log_ndtr(mu / sigma))
            )
            m0, s0 = expo.sigma_prior
            d_prior = -((sig_new - m0) ** 2 - (sigma - m0) ** 2) / (2.0 * s0 * s0)
            log_ratio = d_level + d_prior + zeta  # log-normal walk Jacobian
        u = np.log(rng.uniform(size=T))
        # NaN/-inf ratios compare False on both sides and are rejected
        accept = (log_ratio >= 0.0) | (u < log_ratio)
        if which == "mu":
            mu[accept] = mu_new[accept]
        else:
            sigma[accept] = sig_new[accept]
        state.scales.record(sname, float(accept.sum()), attempts=float(T))
        return accept

    sname = f"{tag}.{name}.{which}"
    s = state.scales[sname]
    a, b = block.hyper["a"], block.hyper["b"]
    old = a if which == "a" else b
    new = float(rng.normal(old, s))
    prior = expo.a_prior if which == "a" else expo.b_prior
    if new <= 0.0:
        ratio = -math.inf
    else:
        sum_log_z, sum_log_1mz = _level_stats(state, key)
        n_levels = layout.n_classical
        a_new, b_new = (new, b) if which == "a" else (a, new)
        d_level = (
            (a_new - a) * sum_log_z
            + (b_new - b) * sum_log_1mz
            - n_levels * (betaln_scalar(a_new, b_new) - betaln_scalar(a, b))
        )
        d_prior = (
            -((new - prior[0]) ** 2 - (old - prior[0]) ** 2) / (2.0 * prior[1] ** 2)
        )
        ratio = d_level + d_prior
    accepted = mh_accept(rng, ratio)
    if accepted:
        block.hyper[which] = new
    state.scales.record(sname, float(accepted))
    return accepted


# ---------------------------------------------------------------------------
# chain driver


def _sweep(state: ChainState) -> None:
    """One full iteration over all update targets."""
    update_disease_param(state, "beta")
    for k in range(1, 5):
        update_disease_param(state, f"lambda_{k}")
    ctx = state.ctx
    for tag in ctx.tags:
        for name in MODEL_FACTORS[tag]:
            update_factor(state, tag, name)
    for tag in ctx.tags:
        for name in MODEL_FACTORS[tag]:
            expo = ctx.layouts[(tag, name)].spec.exposure
            if not expo.has_hyper:
                continue
            if expo.family == "truncated_normal_positive":
                update_hyper(state, tag, name, "mu")
                update_hyper(state, tag, name, "sigma")
            else:
                update_hyper(state, tag, name, "a")
                update_hyper(state, tag, name, "b")


def sample_columns(ctx: FitContext) -> list:
    cols = ["iteration", "beta", "lambda_1", "lambda_2", "lambda_3", "lambda_4"]
    for tag in ctx.tags:
        for name in MODEL_FACTORS[tag]:
            layout = ctx.layouts[(tag, name)]
            expo = layout.spec.exposure
            if expo.has_hyper:
                if expo.family == "truncated_normal_positive":
                    cols.extend(f"{tag}.{name}.mu.{y}" for y in layout.years)
                    cols.extend(f"{tag}.{name}.sigma.{y}" for y in layout.years)
                else:
                    cols.append(f"{tag}.{name}.a")
                    cols.append(f"{tag}.{name}.b")
            if ctx.config.track_factor_means:
                cols.append(f"{tag}.{name}.level_mean")
    return cols


def _sample_row(state: ChainState, iteration: int) -> list:
    ctx = state.ctx
    row = [iteration, state.beta, *state.lam.tolist()]
    for tag in ctx.tags:
        for name in MODEL_FACTORS[tag]:
            block = state.blocks[(tag, name)]
            expo = block.layout.spec.exposure
            if expo.has_hyper:
                if expo.family == "truncated_normal_positive":
                    row.extend(block.hyper["mu"].tolist())
                    row.extend(block.hyper["sigma"].tolist())
                else:
                    row.append(block.hyper["a"])
                    row.append(block.hyper["b"])
            if ctx.config.track_factor_means:
                row.append(float(block.level.mean()))
    return row


def _check_initial_state(state: ChainState) -> None:
    if not np.isfinite(state.loglik):
        raise SamplerError("non-finite disease log-likelihood at initialization")
    for (tag, name), block in state.blocks.items():
        if not np.isfinite(log_measurement_density(block)):
            raise SamplerError(
                f"non-finite posterior at initialization in block {tag}/{name}"
            )


def run_chain(
    config: SamplerConfig,
    cohort: CohortData,
    registry: dict,
    init: dict | None = None,
    *,
    mode: str = "corrected",
    chain_index: int = 0,
    rng_keys=None,
    truth_annual: np.ndarray | None = None,
    ctx: FitContext | None = None,
    out_path=None,
    checkpoint_path=None,
    resume: bool = False,
) -> pd.DataFrame:
    """Run one chain: adaptive phases, burn-in, then thinned sampling.

    Deterministic given (config.seed, chain_index). Returns the retained
    sample table (one row per retained draw); writes it to `out_path` when
    given, and a resumable checkpoint to `checkpoint_path` every
    `config.checkpoint_every` iterations.
    """
    if ctx is None:
        ctx = FitContext(cohort, registry, config, mode=mode, truth_annual=truth_annual)
    keys = list(rng_keys) if rng_keys is not None else [int(config.seed)]
    state = ChainState(ctx, chain_index, rng_keys=keys)
    if init:
        if "beta" in init:
            state.beta = float(init["beta"])
        if "lam" in init:
            state.lam = np.asarray(init["lam"], dtype=float).copy()
        state._refresh_likelihood()
    _check_initial_state(state)

    total = config.adapt_iterations + config.iterations
    cols = sample_columns(ctx)
    rows: list = []
    start = 0

    if resume and checkpoint_path is not None:
        if os.path.exists(checkpoint_path):
            with open(checkpoint_path, "rb") as fh:
                snap = pickle.load(fh)
            start = snap["next_iter"]
            rows = snap["rows"]
            state.beta = snap["beta"]
            state.lam = snap["lam"]
            for key, blk in snap["blocks"].items():
                block = state.blocks[key]
                block.level = blk["level"]
                block.true_values = blk["true"]
                block.hyper = blk["hyper"]
                state._log_level[key] = np.log(block.level)
            state.annual = snap["annual"]
            state.rng.bit_generator.state = snap["rng_state"]
            state.scales.restore(snap["scales"])
            state.resync()

    for it in range(start, total):
        _sweep(state)
        if it < config.adapt_iterations:
            if (it + 1) % config.adapt_phase_len == 0:
                state.scales.adapt_phase()
            if it + 1 == config.adapt_iterations:
                state.scales.freeze()
        else:
            main_it = it - config.adapt_iterations
            if main_it >= config.burnin and (main_it - config.burnin) % config.thin == 0:
                rows.append(_sample_row(state, main_it))
        if (it + 1) % _LIKELIHOOD_REFRESH == 0:
            state._refresh_likelihood()
        if config.debug_check_every and (it + 1) % config.debug_check_every == 0:
            state.check_coherence()
            state.resync()
        if (
            checkpoint_path is not None
            and config.checkpoint_every
            and (it + 1) % config.checkpoint_every == 0
            and it + 1 < total
        ):
            snap = {
                "next_iter": it + 1,
                "rows": rows,
                "beta": state.beta,
                "lam": state.lam,
                "blocks": {
                    key: {
                        "level": blk.level,
                        "true": blk.true_values,
                        "hyper": blk.hyper,
                    }
                    for key, blk in state.blocks.items()
                },
                "annual": state.annual,
                "rng_state": state.rng.bit_generator.state,
                "scales": state.scales.snapshot(),
            }
            with open(checkpoint_path, "wb") as fh:
                pickle.dump(snap, fh)

    if config.adapt_iterations == 0:
        state.scales.freeze()
    table = pd.DataFrame(rows, columns=cols)
    table.attrs["acceptance"] = state.scales.rates()
    table.attrs["chain_index"] = chain_index
    if out_path is not None:
        table.to_csv(out_path, index=False, float_format="%.17g")
    return table
