"""Measurement models: factor registry, error algebra, exposure reconstruction.

Every uncertain factor carries a classical error on its shared level (over a
coarse "classical" domain such as a period p_t) and optionally a
multiplicative Berkson error on the finer domain where true values vary
(such as (year, object)). Concentration-like factors marked `transfer_only`
get their Berkson component only on cells whose values were transferred from
other years/locations, together with the known transfer factor.

The registry (factor -> error types, quantified sds, domains, exposure model)
is data, not code: see ``default_registry.yaml``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import dist
from .cohort import FACTOR_OBS_COLUMNS, CohortData, DomainIndex, build_domain_index

CLASSICAL_FAMILIES = ("additive_normal", "multiplicative_lognormal", "none")
BERKSON_FAMILIES = ("multiplicative_lognormal", "none")
CLASSICAL_DOMAINS = ("p_t", "p_to", "p_oj", "o", "global", "ref_object")
BERKSON_DOMAINS = ("t_o", "t_o_j", "none")

# factors participating in each measurement model, in update order
MODEL_FACTORS = {
    "M0": (),
    "M1a": ("c_rn_1937", "c_rn_ref", "b", "tau_e", "gamma", "omega", "phi"),
    "M2": ("c_rn", "phi", "omega", "gamma"),
    "M2_Expert": ("c_exp", "phi", "omega", "gamma"),
    "M3": ("c_rdp", "varsigma", "omega", "phi"),
    "M4": ("e", "phi"),
}

MONTHS_PER_YEAR = 12.0


class MeasurementError(ValueError):
    """Invalid measurement-model input or violated structural invariant."""


@dataclass(frozen=True)
class ErrorSpec:
    family: str
    sd: float = 0.0
    transfer_only: bool = False

    def __post_init__(self):
        if self.family not in CLASSICAL_FAMILIES:
            raise MeasurementError(f"unknown error family {self.family!r}")
        if self.family != "none" and not self.sd > 0.0:
            raise MeasurementError(f"error sd must be > 0, got {self.sd}")

    @property
    def active(self) -> bool:
        return self.family != "none"


@dataclass(frozen=True)
class ExposureSpec:
    """Exposure model of a factor's level values.

    truncated_normal_positive: per-year latent (mu, sigma) with normal /
    positive-normal hyper priors, or fixed (mu, sigma).
    scaled_beta: bounds plus latent (a, b) with normal hyper priors, or fixed.
    """

    family: str
    bounds: tuple | None = None
    mu_prior: tuple | None = None
    sigma_prior: tuple | None = None
    a_prior: tuple | None = None
    b_prior: tuple | None = None
    fixed: dict | None = None

    def __post_init__(self):
        if self.family not in ("truncated_normal_positive", "scaled_beta"):
            raise MeasurementError(f"unsupported exposure family {self.family!r}")
        if self.family == "scaled_beta":
            if self.bounds is None or not self.bounds[0] < self.bounds[1]:
                raise MeasurementError("scaled_beta exposure needs bounds lo < up")

    @property
    def has_hyper(self) -> bool:
        return self.fixed is None

    def support(self) -> tuple:
        if self.family == "scaled_beta":
            return tuple(self.bounds)
        return (0.0, np.inf)


@dataclass(frozen=True)
class FactorSpec:
    name: str
    classical: ErrorSpec
    berkson: ErrorSpec
    classical_domain: str
    berkson_domain: str
    exposure: ExposureSpec
    role: str = "scale"  # scale | term1 | term2 (two-term reconstruction only)

    def __post_init__(self):
        if self.classical_domain not in CLASSICAL_DOMAINS:
            raise MeasurementError(f"unknown classical domain {self.classical_domain!r}")
        if self.berkson_domain not in BERKSON_DOMAINS:
            raise MeasurementError(f"unknown Berkson domain {self.berkson_domain!r}")
        if self.berkson.family not in BERKSON_FAMILIES:
            raise MeasurementError("Berkson errors must be multiplicative or none")
        if self.berkson.active and self.berkson_domain == "none":
            raise MeasurementError(f"{self.name}: Berkson error without a domain")


@dataclass(frozen=True)
class MeasurementModelDef:
    tag: str
    factors: tuple

    def __post_init__(self):
        expected = MODEL_FACTORS[self.tag]
        got = tuple(f.name for f in self.factors)
        if got != expected:
            raise MeasurementError(
                f"{self.tag}: factor list {got} does not match required {expected}"
            )

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise MeasurementError(f"{self.tag} has no factor {name!r}")


# ---------------------------------------------------------------------------
# registry IO


def _parse_prior(node):
    return (float(node["mean"]), float(node["sd"])) if node else None


def _parse_factor(name: str, node: dict) -> FactorSpec:
    cls = node["classical"]
    brk = node.get("berkson", {"family": "none"})
    expo = node["exposure"]
    return FactorSpec(
        name=name,
        classical=ErrorSpec(
            family=cls["family"],
            sd=float(cls.get("sd", 0.0)),
            transfer_only=bool(cls.get("transfer_only", False)),
        ),
        berkson=ErrorSpec(
            family=brk["family"],
            sd=float(brk.get("sd", 0.0)),
            transfer_only=bool(brk.get("transfer_only", False)),
        ),
        classical_domain=node["classical_domain"],
        berkson_domain=node["berkson_domain"],
        exposure=ExposureSpec(
            family=expo["family"],
            bounds=tuple(expo["bounds"]) if "bounds" in expo else None,
            mu_prior=_parse_prior(expo.get("mu_prior")),
            sigma_prior=_parse_prior(expo.get("sigma_prior")),
            a_prior=_parse_prior(expo.get("a_prior")),
            b_prior=_parse_prior(expo.get("b_prior")),
            fixed={k: float(v) for k, v in expo["fixed"].items()}
            if "fixed" in expo
            else None,
        ),
        role=node.get("role", "scale"),
    )


def load_registry(path=None) -> dict:
    """Parse a registry file into {tag: MeasurementModelDef}; default is shipped."""
    if path is None:
        with resources.files("jembayes").joinpath("default_registry.yaml").open() as fh:
            raw = yaml.safe_load(fh)
    else:
        with open(Path(path)) as fh:
            raw = yaml.safe_load(fh)
    registry = {"M0": MeasurementModelDef(tag="M0", factors=())}
    for tag, factors in raw["models"].items():
        specs = tuple(_parse_factor(name, node) for name, node in factors.items())
        registry[tag] = MeasurementModelDef(tag=tag, factors=specs)
    return registry


def registry_to_dict(registry: dict) -> dict:
    out = {}
    for tag, model in registry.items():
        if not model.factors:
            continue
        fnode = {}
        for f in model.factors:
            node = {
                "classical": {
                    "family": f.classical.family,
                    "sd": f.classical.sd,
                    "transfer_only": f.classical.transfer_only,
                },
                "berkson": {
                    "family": f.berkson.family,
                    "sd": f.berkson.sd,
                    "transfer_only": f.berkson.transfer_only,
                },
                "classical_domain": f.classical_domain,
                "berkson_domain": f.berkson_domain,
                "exposure": {
                    "family": f.exposure.family,
                    **({"bounds": list(f.exposure.bounds)} if f.exposure.bounds else {}),
                    **(
                        {"fixed": dict(f.exposure.fixed)}
                        if f.exposure.fixed is not None
                        else {}
                    ),
                },
                "role": f.role,
            }
            expo = node["exposure"]
            for key in ("mu_prior", "sigma_prior", "a_prior", "b_prior"):
                prior = getattr(f.exposure, key)
                if prior is not None:
                    expo[key] = {"mean": prior[0], "sd": prior[1]}
            fnode[f.name] = node
        out[tag] = fnode
    return {"models": out}


def save_registry(registry: dict, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(registry_to_dict(registry), fh, sort_keys=True)


def registry_hash(registry: dict) -> str:
    payload = json.dumps(registry_to_dict(registry), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# error algebra and reconstruction


def apply_classical(spec: FactorSpec, level, error):
    """Observed value from a level and a classical error realization."""
    if spec.classical.family == "additive_normal":
        return level + error
    if spec.classical.family == "multiplicative_lognormal":
        return level * error
    raise MeasurementError(f"{spec.name} has no classical error component")


def apply_berkson(spec: FactorSpec, level, error, transfer=1.0):
    """True value from a level, a Berkson error realization and a transfer factor."""
    return level * error * transfer


def _require(factors, tag, name):
    try:
        return factors[name]
    except KeyError:
        raise MeasurementError(f"{tag} reconstruction missing factor {name!r}") from None


def reconstruct_exposure(tag: str, cell, factors) -> float:
    """Annual exposure (WLM) for one cell from per-cell factor values.

    `factors` maps factor name to its value at the cell (observed values give
    the job-exposure-matrix exposure, true values give the true exposure).
    The cell's transfer factor is applied here, so concentration values are
    passed transfer-free.
    """
    if tag == "M0":
        return 0.0
    l = cell.time_fraction
    tau = cell.transfer_factor
    if tag == "M2":
        out = (
            MONTHS_PER_YEAR
            * _require(factors, tag, "c_rn")
            * _require(factors, tag, "phi")
            * _require(factors, tag, "omega")
            * _require(factors, tag, "gamma")
            * l
            * tau
        )
    elif tag == "M2_Expert":
        out = (
            MONTHS_PER_YEAR
            * _require(factors, tag, "c_exp")
            * _require(factors, tag, "phi")
            * _require(factors, tag, "omega")
            * _require(factors, tag, "gamma")
            * l
            * tau
        )
    elif tag == "M3":
        out = (
            MONTHS_PER_YEAR
            * _require(factors, tag, "c_rdp")
            * _require(factors, tag, "varsigma")
            * _require(factors, tag, "omega")
            * _require(factors, tag, "phi")
            * l
            * tau
        )
    elif tag == "M4":
        out = _require(factors, tag, "e") * _require(factors, tag, "phi") * l * tau
    elif tag == "M1a":
        term1 = _require(factors, tag, "c_rn_1937") * _require(factors, tag, "b")
        term2 = (
            cell.aux["aux_r"]
            * (_require(factors, tag, "c_rn_ref") / cell.aux["aux_a_ref"])
            * _require(factors, tag, "tau_e")
            * cell.aux["aux_a"]
        )
        out = (
            (term1 + term2)
            * _require(factors, tag, "gamma")
            * _require(factors, tag, "omega")
            * _require(factors, tag, "phi")
            * MONTHS_PER_YEAR
            * l
            * tau
        )
    else:
        raise MeasurementError(f"unknown measurement model tag {tag!r}")
    if out < 0.0:
        raise MeasurementError(
            f"{tag} reconstruction produced negative exposure {out}"
        )
    return float(out)


def reconstruct_cells(tag: str, frame, values: dict) -> np.ndarray:
    """Vectorized reconstruction over a cells-frame slice of one model tag.

    `values` maps factor name to a per-cell array aligned with `frame`.
    """
    if tag == "M0":
        return np.zeros(len(frame))
    l = frame["time_fraction"].to_numpy(dtype=float)
    tau = frame["transfer_factor"].to_numpy(dtype=float)
    if tag == "M2":
        return (
            MONTHS_PER_YEAR
            * values["c_rn"] * values["phi"] * values["omega"] * values["gamma"]
            * l * tau
        )
    if tag == "M2_Expert":
        return (
            MONTHS_PER_YEAR
            * values["c_exp"] * values["phi"] * values["omega"] * values["gamma"]
            * l * tau
        )
    if tag == "M3":
        return (
            MONTHS_PER_YEAR
            * values["c_rdp"] * values["varsigma"] * values["omega"] * values["phi"]
            * l * tau
        )
    if tag == "M4":
        return values["e"] * values["phi"] * l * tau
    if tag == "M1a":
        term1 = values["c_rn_1937"] * values["b"]
        term2 = (
            frame["aux_r"].to_numpy(dtype=float)
            * values["c_rn_ref"] / frame["aux_a_ref"].to_numpy(dtype=float)
            * values["tau_e"] * frame["aux_a"].to_numpy(dtype=float)
        )
        return (
            (term1 + term2)
            * values["gamma"] * values["omega"] * values["phi"]
            * MONTHS_PER_YEAR * l * tau
        )
    raise MeasurementError(f"unknown measurement model tag {tag!r}")


# ---------------------------------------------------------------------------
# factor layouts and blocks


def _classical_keys(spec: FactorSpec, frame):
    kind = spec.classical_domain
    if kind == "p_t":
        return list(zip(frame["period_time"].astype(int)))
    if kind == "p_to":
        return list(zip(frame["period_conc"].astype(int), frame["object_id"].astype(int)))
    if kind == "p_oj":
        return list(zip(frame["object_id"].astype(int), frame["activity_id"].astype(int)))
    if kind == "o":
        return list(zip(frame["object_id"].astype(int)))
    if kind == "global":
        return [(0,)] * len(frame)
    if kind == "ref_object":
        keys = []
        for v in frame["ref_key"]:
            keys.append(None if v != v else (int(v),))
        return keys
    raise MeasurementError(f"unknown classical domain {kind!r}")


def _berkson_keys(spec: FactorSpec, frame, classical_keys):
    kind = spec.berkson_domain
    if kind == "none":
        return classical_keys
    if kind == "t_o":
        return list(zip(frame["year"].astype(int), frame["object_id"].astype(int)))
    if kind == "t_o_j":
        return list(
            zip(
                frame["year"].astype(int),
                frame["object_id"].astype(int),
                frame["activity_id"].astype(int),
            )
        )
    raise MeasurementError(f"unknown Berkson domain {kind!r}")


def _group_constant(values: np.ndarray, group_of_cell: np.ndarray, n_groups: int, what: str):
    out = np.empty(n_groups)
    seen = np.zeros(n_groups, dtype=bool)
    for v, g in zip(values, group_of_cell):
        if not seen[g]:
            out[g] = v
            seen[g] = True
        elif out[g] != v:
            raise MeasurementError(
                f"{what}: value differs within a shared-error group "
                f"({out[g]} vs {v}); shared errors must be identical"
            )
    if not seen.all():
        raise MeasurementError(f"{what}: empty shared-error group")
    return out


@dataclass(frozen=True)
class FactorLayout:
    """Immutable per-(model, factor) indexing shared by all chains."""

    tag: str
    spec: FactorSpec
    index: DomainIndex
    cell_rows: np.ndarray  # global cell row numbers (frozen ordering)
    w_obs: np.ndarray  # observed value per classical group
    tau_brk: np.ndarray  # transfer factor per Berkson group (1 where unused)
    active_brk: np.ndarray  # Berkson error present per group
    years: tuple  # distinct year keys (concentration factors), else ()
    year_idx: np.ndarray | None  # classical group -> position in `years`

    @property
    def n_classical(self) -> int:
        return self.index.n_classical

    @property
    def n_berkson(self) -> int:
        return self.index.n_berkson


def build_layouts(cohort: CohortData, registry: dict, require_observed: bool = True) -> dict:
    """FactorLayouts for every (tag, factor) present in the cohort.

    M0 cells are masked out: they belong to no factor domain and contribute
    zero exposure. `require_observed=False` allows building the index before
    observed factor values exist (used by the data generator).
    """
    cells = cohort.cells
    layouts = {}
    for tag in [t for t in MODEL_FACTORS if t != "M0"]:
        mask = (cells["model_tag"] == tag).to_numpy()
        if not mask.any():
            continue
        if tag not in registry:
            raise MeasurementError(f"cohort uses model {tag} missing from registry")
        frame = cells.loc[mask]
        rows = np.flatnonzero(mask).astype(np.int32)
        for spec in registry[tag].factors:
            ckeys = _classical_keys(spec, frame)
            bkeys = _berkson_keys(spec, frame, ckeys)
            index = build_domain_index(ckeys, bkeys)
            obs_col = FACTOR_OBS_COLUMNS[spec.name]
            obs = frame[obs_col].to_numpy(dtype=float)
            if np.isnan(obs).any():
                if require_observed:
                    row = rows[int(np.flatnonzero(np.isnan(obs))[0])]
                    raise MeasurementError(
                        f"{tag}/{spec.name}: missing observed value ({obs_col}) "
                        f"at cell row {row}"
                    )
                w_obs = np.full(index.n_classical, np.nan)
            else:
                w_obs = _group_constant(
                    obs, index.cls_of_cell, index.n_classical, f"{tag}/{spec.name}"
                )
            if spec.berkson.active and spec.berkson.transfer_only:
                transferred = frame["transferred"].to_numpy(dtype=float)
                tau = frame["transfer_factor"].to_numpy(dtype=float)
                active = _group_constant(
                    transferred, index.brk_of_cell, index.n_berkson,
                    f"{tag}/{spec.name} transferred",
                ).astype(bool)
                tau_brk = _group_constant(
                    np.where(transferred > 0, tau, 1.0),
                    index.brk_of_cell, index.n_berkson,
                    f"{tag}/{spec.name} transfer factor",
                )
            elif spec.berkson.active:
                active = np.ones(index.n_berkson, dtype=bool)
                tau_brk = np.ones(index.n_berkson)
            else:
                active = np.zeros(index.n_berkson, dtype=bool)
                tau_brk = np.ones(index.n_berkson)
            if spec.exposure.family == "truncated_normal_positive" and spec.exposure.has_hyper:
                yr = frame["year"].to_numpy(dtype=int)
                year_of_group = np.full(index.n_classical, np.iinfo(np.int64).max)
                np.minimum.at(year_of_group, index.cls_of_cell, yr)
                years = tuple(sorted(set(int(y) for y in year_of_group)))
                pos = {y: i for i, y in enumerate(years)}
                year_idx = np.array([pos[int(y)] for y in year_of_group], dtype=np.int32)
            else:
                years, year_idx = (), None
            layouts[(tag, spec.name)] = FactorLayout(
                tag=tag,
                spec=spec,
                index=index,
                cell_rows=rows,
                w_obs=w_obs,
                tau_brk=tau_brk,
                active_brk=active,
                years=years,
                year_idx=year_idx,
            )
    return layouts


@dataclass
class FactorBlock:
    """Chain-local latent state of one uncertain factor.

    `level` lives on the classical domain, `true_values` on the Berkson
    domain; `hyper` holds the block's exposure-model hyperparameters.
    """

    layout: FactorLayout
    level: np.ndarray
    true_values: np.ndarray
    hyper: dict = field(default_factory=dict)

    def cell_values(self) -> np.ndarray:
        """Per-cell true factor values (transfer-free)."""
        vals = self.true_values[self.layout.index.brk_of_cell]
        return vals

    def implied_classical_errors(self) -> np.ndarray:
        spec = self.layout.spec
        if spec.classical.family == "additive_normal":
            return self.layout.w_obs - self.level
        if spec.classical.family == "multiplicative_lognormal":
            return self.layout.w_obs / self.level
        raise MeasurementError(f"{spec.name} has no classical error component")


def _initial_level(spec: FactorSpec, w_obs: np.ndarray) -> np.ndarray:
    expo = spec.exposure
    if expo.family == "scaled_beta":
        lo, up = expo.bounds
        margin = 1e-3 * (up - lo)
        return np.clip(w_obs, lo + margin, up - margin)
    if expo.has_hyper:
        ref = abs(expo.mu_prior[0])
    else:
        ref = abs(expo.fixed["mu"])
    floor = max(0.05 * ref, 1e-8)
    return np.maximum(w_obs, floor)


def _initial_hyper(spec: FactorSpec) -> dict:
    expo = spec.exposure
    if not expo.has_hyper:
        return {}
    if expo.family == "truncated_normal_positive":
        return {"mu": None, "sigma": None}  # sized by caller (per year)
    return {"a": expo.a_prior[0], "b": expo.b_prior[0]}


def init_block(layout: FactorLayout) -> FactorBlock:
    """Initial state: levels at observed values (clipped into the exposure
    support), all Berkson errors at 1, hyperparameters at their prior means.
    This reproduces the error-free reconstruction and has finite density."""
    level = _initial_level(layout.spec, layout.w_obs)
    true = level[layout.index.cls_of_brk] * layout.tau_brk
    hyper = _initial_hyper(layout.spec)
    if "mu" in hyper:
        n_years = len(layout.years)
        hyper["mu"] = np.full(n_years, layout.spec.exposure.mu_prior[0])
        hyper["sigma"] = np.full(n_years, layout.spec.exposure.sigma_prior[0])
    return FactorBlock(layout=layout, level=level, true_values=true, hyper=hyper)


def _exposure_logpdf(block: FactorBlock, level: np.ndarray) -> np.ndarray:
    spec = block.layout.spec
    expo = spec.exposure
    if expo.family == "scaled_beta":
        lo, up = expo.bounds
        if expo.has_hyper:
            a, b = block.hyper["a"], block.hyper["b"]
        else:
            a, b = expo.fixed["a"], expo.fixed["b"]
        return dist.scaled_beta_logpdf(level, lo, up, a, b)
    if expo.has_hyper:
        mu = block.hyper["mu"][block.layout.year_idx]
        sigma = block.hyper["sigma"][block.layout.year_idx]
    else:
        mu, sigma = expo.fixed["mu"], expo.fixed["sigma"]
    return dist.truncnorm_pos_logpdf(level, mu, sigma)


def _classical_logpdf(spec: FactorSpec, w: np.ndarray, level: np.ndarray) -> np.ndarray:
    if spec.classical.family == "additive_normal":
        return dist.norm_logpdf(w, level, spec.classical.sd)
    if spec.classical.family == "multiplicative_lognormal":
        sd = spec.classical.sd
        with np.errstate(divide="ignore", invalid="ignore"):
            mu_log = np.where(level > 0, np.log(np.where(level > 0, level, 1.0)), np.nan)
        out = dist.lognorm_logpdf(w, mu_log - 0.5 * sd * sd, sd)
        return np.where(level > 0, out, -np.inf)
    return np.zeros_like(np.asarray(w, dtype=float))


def _berkson_logpdf(block: FactorBlock, level: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Per active Berkson group: density of the true value given the level."""
    layout = block.layout
    sd = layout.spec.berkson.sd
    act = layout.active_brk
    if not act.any():
        return np.zeros(0)
    base = level[layout.index.cls_of_brk[act]] * layout.tau_brk[act]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu_log = np.log(np.where(base > 0, base, 1.0))
    out = dist.lognorm_logpdf(true[act], mu_log - 0.5 * sd * sd, sd)
    return np.where(base > 0, out, -np.inf)


def _hyper_logpdf(block: FactorBlock) -> float:
    expo = block.layout.spec.exposure
    if not expo.has_hyper:
        return 0.0
    if expo.family == "truncated_normal_positive":
        mu_m, mu_s = expo.mu_prior
        sg_m, sg_s = expo.sigma_prior
        return float(
            np.sum(dist.norm_logpdf(block.hyper["mu"], mu_m, mu_s))
            + np.sum(dist.truncnorm_pos_logpdf(block.hyper["sigma"], sg_m, sg_s))
        )
    a, b = block.hyper["a"], block.hyper["b"]
    if a <= 0.0 or b <= 0.0:
        return -np.inf
    a_m, a_s = expo.a_prior
    b_m, b_s = expo.b_prior
    return float(dist.norm_logpdf(a, a_m, a_s) + dist.norm_logpdf(b, b_m, b_s))


def log_measurement_density(block: FactorBlock) -> float:
    """Joint log density of one factor block.

    Classical density of the observed values given the levels, plus Berkson
    density of the true values given the (mapped) levels, plus the exposure
    model of the levels, plus the hyper priors. -inf on support violations.
    """
    layout = block.layout
    total = float(np.sum(_classical_logpdf(layout.spec, layout.w_obs, block.level)))
    total += float(np.sum(_berkson_logpdf(block, block.level, block.true_values)))
    total += float(np.sum(_exposure_logpdf(block, block.level)))
    total += _hyper_logpdf(block)
    return total


def swap_concentration_error_families(registry: dict) -> dict:
    """Misspecification helper: swap additive<->multiplicative classical error
    families of the concentration-like factors, preserving error scale via the
    exposure-model prior mean."""
    conc = {"c_rn", "c_exp", "c_rdp", "e", "c_rn_1937", "c_rn_ref"}
    out = {}
    for tag, model in registry.items():
        factors = []
        for f in model.factors:
            if f.name in conc and f.classical.active:
                expo = f.exposure
                ref = abs(expo.mu_prior[0]) if expo.has_hyper else abs(expo.fixed["mu"])
                if f.classical.family == "additive_normal":
                    new = ErrorSpec(
                        family="multiplicative_lognormal",
                        sd=f.classical.sd / ref,
                        transfer_only=f.classical.transfer_only,
                    )
                else:
                    new = ErrorSpec(
                        family="additive_normal",
                        sd=f.classical.sd * ref,
                        transfer_only=f.classical.transfer_only,
                    )
                factors.append(replace(f, classical=new))
            else:
                factors.append(f)
        out[tag] = MeasurementModelDef(tag=tag, factors=tuple(factors))
    return out


def pin_uniform_beta(registry: dict) -> dict:
    """Misspecification helper: pin every scaled-beta exposure model to the
    fixed uniform a = b = 1, disabling its hyper updates."""
    out = {}
    for tag, model in registry.items():
        factors = []
        for f in model.factors:
            if f.exposure.family == "scaled_beta":
                expo = replace(
                    f.exposure,
                    a_prior=None,
                    b_prior=None,
                    fixed={"a": 1.0, "b": 1.0},
                )
                factors.append(replace(f, exposure=expo))
            else:
                factors.append(f)
        out[tag] = MeasurementModelDef(tag=tag, factors=tuple(factors))
    return out
