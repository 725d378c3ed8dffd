"""Cohort data model, file ingestion, domain indexing and sparse structures.

The global cell ordering (worker-major, year-minor) is frozen at load time;
every vector the sampler touches (annual exposure, cumulative exposure) uses
this ordering, so the cumulation and mapping structures can be built once and
shared read-only across chains.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

MODEL_TAGS = ("M0", "M1a", "M2", "M2_Expert", "M3", "M4")

# observed-value column per uncertain factor
FACTOR_OBS_COLUMNS = {
    "c_rn": "obs_c_rn",
    "c_exp": "obs_c_exp",
    "c_rdp": "obs_c_rdp",
    "e": "obs_e",
    "b": "obs_b",
    "tau_e": "obs_tau_e",
    "varsigma": "obs_varsigma",
    "phi": "obs_phi",
    "omega": "obs_omega",
    "gamma": "obs_gamma",
    "c_rn_1937": "obs_c_rn_1937",
    "c_rn_ref": "obs_c_rn_ref",
}

AUX_COLUMNS = ("aux_r", "aux_a", "aux_a_ref", "ref_key")


def _load_schema():
    with resources.files("jembayes").joinpath("cohort_schema.yaml").open() as fh:
        return yaml.safe_load(fh)


SCHEMA = _load_schema()
WORKER_COLUMNS = tuple(SCHEMA["workers"]["required"])
CELL_REQUIRED_COLUMNS = tuple(SCHEMA["cells"]["required"])
CELL_OPTIONAL_COLUMNS = tuple(SCHEMA["cells"]["optional"])
CELL_COLUMNS = CELL_REQUIRED_COLUMNS + CELL_OPTIONAL_COLUMNS


class CohortError(ValueError):
    """Malformed cohort file or violated cohort invariant."""


# ---------------------------------------------------------------------------
# record types


@dataclass(frozen=True)
class ExposureCell:
    """One worker-year-object-activity exposure record."""

    worker_id: int
    year: int
    object_id: int
    activity_id: int
    model_tag: str
    time_fraction: float
    transfer_factor: float
    transferred: bool
    period_time: int
    period_conc: int
    observed_exposure: float
    observed_factors: dict = field(default_factory=dict)
    aux: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model_tag not in MODEL_TAGS:
            raise CohortError(
                f"worker {self.worker_id} year {self.year}: "
                f"unknown model_tag {self.model_tag!r}"
            )
        if not self.time_fraction >= 0.0:
            raise CohortError(
                f"worker {self.worker_id} year {self.year}: "
                f"time_fraction must be >= 0, got {self.time_fraction}"
            )
        if not self.transfer_factor > 0.0:
            raise CohortError(
                f"worker {self.worker_id} year {self.year}: "
                f"transfer_factor must be > 0, got {self.transfer_factor}"
            )
        if self.model_tag == "M0" and self.observed_exposure != 0.0:
            raise CohortError(
                f"worker {self.worker_id} year {self.year}: "
                f"M0 cells must have observed_exposure 0, got {self.observed_exposure}"
            )


@dataclass(frozen=True)
class WorkerRecord:
    """One worker: survival endpoints plus the ordered exposure cells."""

    worker_id: int
    birth_year: int
    entry_age: float
    exit_age: float
    event: bool
    cells: tuple

    def __post_init__(self):
        if not self.entry_age < self.exit_age:
            raise CohortError(
                f"worker {self.worker_id}: entry_age must be < exit_age "
                f"({self.entry_age} >= {self.exit_age})"
            )
        years = [c.year for c in self.cells]
        if any(b <= a for a, b in zip(years, years[1:])):
            raise CohortError(
                f"worker {self.worker_id}: exposure years must be strictly increasing"
            )
        lo = self.birth_year + math.floor(self.entry_age)
        hi = self.birth_year + math.ceil(self.exit_age) - 1
        for c in self.cells:
            if not lo <= c.year <= hi:
                raise CohortError(
                    f"worker {self.worker_id}: exposure year {c.year} outside "
                    f"calendar span [{lo}, {hi}] of entry/exit ages"
                )


# ---------------------------------------------------------------------------
# sparse binary structures


@dataclass(frozen=True)
class SparseBinaryMatrix:
    """Binary incidence matrix stored as a sorted coordinate list.

    Two shapes occur: the per-worker cumulation variant (block lower-triangular,
    `block_sizes` set) and the mapping variant (exactly one 1 per row,
    `row_to_col` set). All entries are 1, so products specialize to
    gather/scatter sums.
    """

    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    block_sizes: np.ndarray | None = None
    row_to_col: np.ndarray | None = None

    @property
    def nnz(self) -> int:
        return int(self.row_idx.shape[0])

    def matvec(self, x: np.ndarray) -> np.ndarray:
        """Generic product; exact gather/scatter sum over the coordinate list."""
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.cols:
            raise ValueError(f"length {x.shape[0]} does not match {self.cols} columns")
        if self.row_to_col is not None:
            return x[self.row_to_col]
        out = np.zeros(self.rows)
        np.add.at(out, self.row_idx, x[self.col_idx])
        return out

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols), dtype=np.int8)
        out[self.row_idx, self.col_idx] = 1
        return out


def build_cumulation(workers) -> SparseBinaryMatrix:
    """Block lower-triangular matrix turning annual values into per-worker running sums.

    `workers` is a list of WorkerRecord (cell counts are taken per worker) or a
    sequence of per-worker cell counts. The result has sum n_i(n_i+1)/2 ones.
    """
    if len(workers) and isinstance(workers[0], WorkerRecord):
        sizes = np.array([len(w.cells) for w in workers], dtype=np.int64)
    else:
        sizes = np.asarray(workers, dtype=np.int64)
    n = int(sizes.sum())
    nnz = int((sizes * (sizes + 1) // 2).sum())
    row_idx = np.empty(nnz, dtype=np.int32)
    col_idx = np.empty(nnz, dtype=np.int32)
    pos = 0
    offset = 0
    for size in sizes:
        for r in range(size):
            m = r + 1
            row_idx[pos : pos + m] = offset + r
            col_idx[pos : pos + m] = np.arange(offset, offset + m)
            pos += m
        offset += size
    return SparseBinaryMatrix(
        rows=n, cols=n, row_idx=row_idx, col_idx=col_idx, block_sizes=sizes
    )


def cumulate(annual: np.ndarray, plan: SparseBinaryMatrix) -> np.ndarray:
    """Per-worker running totals of `annual` under the cumulation `plan`.

    Specializes to grouped prefix sums (exactly the matrix product, since all
    entries are 1) when the plan carries its block structure.
    """
    annual = np.asarray(annual, dtype=float)
    if annual.shape[0] != plan.cols:
        raise ValueError(
            f"annual vector length {annual.shape[0]} does not match "
            f"{plan.cols} plan columns"
        )
    if plan.block_sizes is None:
        return plan.matvec(annual)
    return grouped_cumsum(annual, plan.block_sizes)


def grouped_cumsum(values: np.ndarray, block_sizes: np.ndarray) -> np.ndarray:
    """Prefix sums restarted at each block boundary."""
    c = np.cumsum(values)
    out = np.empty_like(c)
    starts = np.concatenate(([0], np.cumsum(block_sizes)[:-1])).astype(np.int64)
    base = np.where(starts > 0, c[starts - 1], 0.0)
    out[:] = c - np.repeat(base, block_sizes)
    return out


# ---------------------------------------------------------------------------
# domain indexing


@dataclass(frozen=True)
class DomainIndex:
    """Nested classical/Berkson partition of one factor's cells.

    The Berkson partition refines the classical one: every Berkson group lies
    inside exactly one classical group.
    """

    classical_keys: tuple
    berkson_keys: tuple
    cls_of_cell: np.ndarray
    brk_of_cell: np.ndarray
    cls_of_brk: np.ndarray

    @property
    def n_cells(self) -> int:
        return int(self.cls_of_cell.shape[0])

    @property
    def n_classical(self) -> int:
        return len(self.classical_keys)

    @property
    def n_berkson(self) -> int:
        return len(self.berkson_keys)


def _key_ids(keys, what: str):
    uniq = sorted(set(keys))
    index = {k: i for i, k in enumerate(uniq)}
    ids = np.fromiter((index[k] for k in keys), dtype=np.int32, count=len(keys))
    return tuple(uniq), ids


def build_domain_index(classical_keys, berkson_keys) -> DomainIndex:
    """Index cells by their classical and Berkson group keys.

    Both arguments are sequences (one entry per cell) of hashable keys. A None
    (or NaN-containing) key means the cell is not covered and is an error.
    """
    if len(classical_keys) != len(berkson_keys):
        raise ValueError("classical and Berkson key lists differ in length")
    for row, (ck, bk) in enumerate(zip(classical_keys, berkson_keys)):
        for what, k in (("classical", ck), ("Berkson", bk)):
            bad = k is None or (
                isinstance(k, tuple) and any(v is None or v != v for v in k)
            )
            if bad:
                raise CohortError(f"cell row {row} not covered by any {what} group")
    cls_keys, cls_ids = _key_ids(classical_keys, "classical")
    brk_keys, brk_ids = _key_ids(berkson_keys, "Berkson")
    cls_of_brk = np.full(len(brk_keys), -1, dtype=np.int32)
    for c, b in zip(cls_ids, brk_ids):
        if cls_of_brk[b] == -1:
            cls_of_brk[b] = c
        elif cls_of_brk[b] != c:
            raise CohortError(
                f"Berkson group {brk_keys[b]!r} spans several classical groups; "
                "the Berkson partition must refine the classical one"
            )
    return DomainIndex(
        classical_keys=cls_keys,
        berkson_keys=brk_keys,
        cls_of_cell=cls_ids,
        brk_of_cell=brk_ids,
        cls_of_brk=cls_of_brk,
    )


def build_mapping(index: DomainIndex, from_level: str, to_level: str) -> SparseBinaryMatrix:
    """Expansion matrix between nested levels; each output row selects its parent value.

    Supported level pairs: classical->berkson and berkson->cells.
    """
    if (from_level, to_level) == ("classical", "berkson"):
        row_to_col = index.cls_of_brk.copy()
        rows, cols = index.n_berkson, index.n_classical
    elif (from_level, to_level) == ("berkson", "cells"):
        row_to_col = index.brk_of_cell.copy()
        rows, cols = index.n_cells, index.n_berkson
    elif (from_level, to_level) == ("classical", "cells"):
        row_to_col = index.cls_of_cell.copy()
        rows, cols = index.n_cells, index.n_classical
    else:
        raise ValueError(f"unsupported mapping {from_level!r} -> {to_level!r}")
    return SparseBinaryMatrix(
        rows=rows,
        cols=cols,
        row_idx=np.arange(rows, dtype=np.int32),
        col_idx=row_to_col.astype(np.int32),
        row_to_col=row_to_col.astype(np.int32),
    )


# ---------------------------------------------------------------------------
# ingestion


def _check_columns(df: pd.DataFrame, required, optional, path):
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise CohortError(f"{path}: missing required columns {missing}")
    unknown = [c for c in df.columns if c not in required and c not in optional]
    if unknown:
        raise CohortError(f"{path}: unknown columns {unknown}")


def _check_numeric(df: pd.DataFrame, columns, path):
    for col in columns:
        values = pd.to_numeric(df[col], errors="coerce")
        bad = values.isna() & df[col].notna() | df[col].isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0])
            raise CohortError(
                f"{path}: malformed value in row {row + 2}, field {col!r}"
            )
        df[col] = values


def _resolve_paths(path, workers_path):
    path = Path(path)
    if path.is_dir():
        return path / "cells.csv", path / "workers.csv"
    if workers_path is None:
        workers_path = path.with_name("workers.csv")
    return path, Path(workers_path)


def load_cohort(path, workers_path=None) -> list:
    """Read a cohort (cells.csv + workers.csv) into validated WorkerRecords.

    `path` may be the cohort directory or the cells file; records come back
    deterministically ordered by worker_id, cells by year.
    """
    cells_path, workers_path = _resolve_paths(path, workers_path)
    for p in (cells_path, workers_path):
        if not Path(p).exists():
            raise CohortError(f"cohort file not found: {p}")
    workers = pd.read_csv(workers_path)
    cells = pd.read_csv(cells_path)
    _check_columns(workers, WORKER_COLUMNS, (), workers_path)
    _check_columns(cells, CELL_REQUIRED_COLUMNS, CELL_OPTIONAL_COLUMNS, cells_path)
    _check_numeric(workers, WORKER_COLUMNS, workers_path)
    numeric_cells = [c for c in CELL_REQUIRED_COLUMNS if c != "model_tag"]
    _check_numeric(cells, numeric_cells, cells_path)

    workers = workers.sort_values("worker_id", kind="stable").reset_index(drop=True)
    cells = cells.sort_values(["worker_id", "year"], kind="stable").reset_index(drop=True)
    if workers["worker_id"].duplicated().any():
        dup = int(workers.loc[workers["worker_id"].duplicated(), "worker_id"].iloc[0])
        raise CohortError(f"{workers_path}: duplicate worker_id {dup}")

    known = set(workers["worker_id"].astype(int))
    orphan = ~cells["worker_id"].astype(int).isin(known)
    if orphan.any():
        wid = int(cells.loc[orphan, "worker_id"].iloc[0])
        raise CohortError(f"{cells_path}: cell references unknown worker {wid}")

    obs_cols = [c for c in FACTOR_OBS_COLUMNS.values() if c in cells.columns]
    aux_cols = [c for c in AUX_COLUMNS if c in cells.columns]
    col_of_factor = {f: c for f, c in FACTOR_OBS_COLUMNS.items() if c in cells.columns}

    grouped = {wid: g for wid, g in cells.groupby("worker_id", sort=False)}
    records = []
    for wrow in workers.itertuples(index=False):
        wid = int(wrow.worker_id)
        wcells = []
        g = grouped.get(wid)
        if g is not None:
            for row in g.itertuples(index=False):
                observed = {}
                for factor, col in col_of_factor.items():
                    v = getattr(row, col)
                    if v == v:  # not NaN
                        observed[factor] = float(v)
                aux = {}
                for col in aux_cols:
                    v = getattr(row, col)
                    if v == v:
                        aux[col] = float(v)
                wcells.append(
                    ExposureCell(
                        worker_id=wid,
                        year=int(row.year),
                        object_id=int(row.object_id),
                        activity_id=int(row.activity_id),
                        model_tag=str(row.model_tag),
                        time_fraction=float(row.time_fraction),
                        transfer_factor=float(row.transfer_factor),
                        transferred=bool(row.transferred),
                        period_time=int(row.period_time),
                        period_conc=int(row.period_conc),
                        observed_exposure=float(row.observed_exposure),
                        observed_factors=observed,
                        aux=aux,
                    )
                )
        records.append(
            WorkerRecord(
                worker_id=wid,
                birth_year=int(wrow.birth_year),
                entry_age=float(wrow.entry_age),
                exit_age=float(wrow.exit_age),
                event=bool(wrow.event),
                cells=tuple(wcells),
            )
        )
    return records


def save_cohort(records, path) -> None:
    """Write records as cells.csv + workers.csv under `path` (a directory)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    data = CohortData.from_records(records)
    data.workers.to_csv(path / "workers.csv", index=False, float_format="%.17g")
    data.cells.to_csv(path / "cells.csv", index=False, float_format="%.17g")


@dataclass
class CohortData:
    """Columnar view of a cohort with the frozen global cell ordering.

    Immutable after construction; shared read-only across chains.
    """

    workers: pd.DataFrame
    cells: pd.DataFrame

    @classmethod
    def from_records(cls, records) -> "CohortData":
        records = sorted(records, key=lambda r: r.worker_id)
        wrows = [
            (r.worker_id, r.birth_year, r.entry_age, r.exit_age, int(r.event))
            for r in records
        ]
        workers = pd.DataFrame(wrows, columns=list(WORKER_COLUMNS))
        crows = []
        for r in records:
            for c in r.cells:
                row = {
                    "worker_id": c.worker_id,
                    "year": c.year,
                    "object_id": c.object_id,
                    "activity_id": c.activity_id,
                    "model_tag": c.model_tag,
                    "time_fraction": c.time_fraction,
                    "transfer_factor": c.transfer_factor,
                    "transferred": int(c.transferred),
                    "period_time": c.period_time,
                    "period_conc": c.period_conc,
                    "observed_exposure": c.observed_exposure,
                }
                for factor, col in FACTOR_OBS_COLUMNS.items():
                    row[col] = c.observed_factors.get(factor, np.nan)
                for col in AUX_COLUMNS:
                    row[col] = c.aux.get(col, np.nan)
                crows.append(row)
        cells = pd.DataFrame(crows, columns=list(CELL_COLUMNS))
        return cls(workers=workers, cells=cells)

    @classmethod
    def load(cls, path, workers_path=None) -> "CohortData":
        return cls.from_records(load_cohort(path, workers_path))

    @property
    def n_workers(self) -> int:
        return len(self.workers)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def block_sizes(self) -> np.ndarray:
        counts = self.cells.groupby("worker_id", sort=True).size()
        counts = counts.reindex(self.workers["worker_id"].to_numpy(), fill_value=0)
        return counts.to_numpy(dtype=np.int64)

    def worker_of_cell(self) -> np.ndarray:
        order = {wid: i for i, wid in enumerate(self.workers["worker_id"])}
        return self.cells["worker_id"].map(order).to_numpy(dtype=np.int32)

    def age_end(self) -> np.ndarray:
        """Age at which each cell's exposure accrues (end of its calendar year)."""
        birth = self.workers.set_index("worker_id")["birth_year"]
        b = self.cells["worker_id"].map(birth).to_numpy(dtype=float)
        return self.cells["year"].to_numpy(dtype=float) - b + 1.0
