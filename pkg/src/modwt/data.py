"""Data model: schema-driven CSV ingestion, moderator stratification, and
one-hot design matrices.

Every downstream step (overlap audit, weight fitting, balance, outcome
models, sensitivity) consumes the `Dataset` built here. Columns are stored
as numpy arrays: categorical covariates as integer level codes against the
declared level list, continuous covariates as float64.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, EmptyStratumError, IngestionError

# Cell values treated as missing during ingestion. Rows with a missing
# analysis variable are dropped (and counted), never imputed.
MISSING_MARKERS = frozenset({"", ".", "NA"})

CATEGORICAL = "categorical"
CONTINUOUS = "continuous"


@dataclass(frozen=True)
class CovariateSpec:
    """One covariate column: its name, kind, and declared levels.

    For categorical covariates the first declared level is the reference
    level dropped during encoding; `levels` must be empty for continuous
    covariates.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in (CATEGORICAL, CONTINUOUS):
            raise ConfigError(f"covariate {self.name!r}: kind must be "
                              f"'categorical' or 'continuous', got {self.kind!r}")
        if self.kind == CATEGORICAL:
            if len(self.levels) < 2:
                raise ConfigError(f"categorical covariate {self.name!r} needs "
                                  f"at least 2 declared levels")
            if len(set(self.levels)) != len(self.levels):
                raise ConfigError(f"covariate {self.name!r} has duplicate levels")
        elif self.levels:
            raise ConfigError(f"continuous covariate {self.name!r} must not "
                              f"declare levels")


@dataclass(frozen=True)
class SchemaConfig:
    """Names the analysis columns and describes each covariate.

    `survey_weight=None` means the file carries no weight column and every
    row gets weight 1.0.
    """

    treatment: str
    moderator: str
    outcome: str
    covariates: tuple[CovariateSpec, ...]
    survey_weight: str | None = None

    def __post_init__(self):
        names = [self.treatment, self.moderator, self.outcome]
        if self.survey_weight is not None:
            names.append(self.survey_weight)
        names += [c.name for c in self.covariates]
        dupes = {n for n in names if names.count(n) > 1}
        if dupes:
            raise ConfigError(f"schema reuses column names: {sorted(dupes)}")
        if not self.covariates:
            raise ConfigError("schema declares no covariates")

    @classmethod
    def from_dict(cls, d: Mapping) -> "SchemaConfig":
        try:
            covs = tuple(
                CovariateSpec(name=c["name"], kind=c["kind"],
                              levels=tuple(c.get("levels") or ()))
                for c in d["covariates"]
            )
            return cls(treatment=d["treatment"], moderator=d["moderator"],
                       outcome=d["outcome"], covariates=covs,
                       survey_weight=d.get("survey_weight"))
        except KeyError as e:
            raise ConfigError(f"schema is missing required key {e}") from e

    @classmethod
    def from_json(cls, text: str | bytes) -> "SchemaConfig":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        return {
            "treatment": self.treatment,
            "moderator": self.moderator,
            "outcome": self.outcome,
            "survey_weight": self.survey_weight,
            "covariates": [
                {"name": c.name, "kind": c.kind,
                 "levels": list(c.levels) if c.kind == CATEGORICAL else None}
                for c in self.covariates
            ],
        }


@dataclass(frozen=True)
class Dataset:
    """Immutable column store for one analysis sample.

    `categorical[name]` holds integer codes into the covariate's declared
    level list; `continuous[name]` holds float64 values. Treatment,
    moderator and outcome are 0/1 int8 vectors; survey weights are finite
    and strictly positive floats. `n_dropped` counts ingestion rows removed
    for missing analysis values.
    """

    schema: SchemaConfig
    treatment: np.ndarray
    moderator: np.ndarray
    outcome: np.ndarray
    survey_weights: np.ndarray
    categorical: Mapping[str, np.ndarray]
    continuous: Mapping[str, np.ndarray]
    n_dropped: int = 0

    def __post_init__(self):
        for arr in (self.treatment, self.moderator, self.outcome,
                    self.survey_weights, *self.categorical.values(),
                    *self.continuous.values()):
            arr.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return int(self.treatment.shape[0])

    def covariate_values(self, name: str) -> np.ndarray:
        """Raw column for one covariate (codes if categorical)."""
        if name in self.categorical:
            return self.categorical[name]
        if name in self.continuous:
            return self.continuous[name]
        raise KeyError(f"unknown covariate {name!r}")

    def covariate_spec(self, name: str) -> CovariateSpec:
        for spec in self.schema.covariates:
            if spec.name == name:
                return spec
        raise KeyError(f"unknown covariate {name!r}")

    def level_indicator(self, name: str, level: str) -> np.ndarray:
        """0/1 vector flagging rows at `level` of categorical `name`."""
        spec = self.covariate_spec(name)
        if level not in spec.levels:
            raise KeyError(f"covariate {name!r} has no level {level!r}")
        code = spec.levels.index(level)
        return (self.categorical[name] == code).astype(np.float64)

    def take(self, index: np.ndarray) -> "Dataset":
        """Row subset (column metadata unchanged, drop count reset)."""
        return Dataset(
            schema=self.schema,
            treatment=self.treatment[index].copy(),
            moderator=self.moderator[index].copy(),
            outcome=self.outcome[index].copy(),
            survey_weights=self.survey_weights[index].copy(),
            categorical={k: v[index].copy() for k, v in self.categorical.items()},
            continuous={k: v[index].copy() for k, v in self.continuous.items()},
            n_dropped=0,
        )


@dataclass(frozen=True)
class DesignMatrix:
    """Dense covariate matrix with deterministic column labels.

    Each categorical covariate with L declared levels contributes L-1
    indicator columns (first level is the reference); continuous covariates
    contribute one column. `columns` maps positions back to
    (covariate, level) with level=None for continuous columns.
    """

    matrix: np.ndarray
    labels: tuple[str, ...]
    columns: tuple[tuple[str, str | None], ...]

    def __post_init__(self):
        self.matrix.setflags(write=False)
        if len(self.labels) != self.matrix.shape[1]:
            raise ValueError("label count does not match matrix width")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("design column labels are not unique")

    @property
    def n_rows(self) -> int:
        return int(self.matrix.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.matrix.shape[1])


def _open_csv(source) -> Iterable[list[str]]:
    if isinstance(source, (str, Path)):
        text = Path(source).read_bytes().decode("utf-8")
    elif isinstance(source, bytes):
        text = source.decode("utf-8")
    elif hasattr(source, "read"):
        raw = source.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw
    else:
        raise IngestionError(f"unsupported CSV source type {type(source)!r}")
    return csv.reader(io.StringIO(text, newline=""))


def _parse_binary(value: str, row: int, column: str) -> int:
    if value in ("0", "1"):
        return int(value)
    raise IngestionError(
        f"row {row}: column {column!r} must be 0 or 1, got {value!r}")


def load_dataset(csv_source, schema: SchemaConfig) -> Dataset:
    """Read a header-ed CSV (RFC 4180, UTF-8) into a `Dataset`.

    Rows missing any analysis variable (markers: empty, '.', 'NA') are
    dropped and counted in `Dataset.n_dropped`. Invalid values that are
    present -- non-binary treatment/moderator/outcome, undeclared
    categorical levels, non-positive or non-finite weights -- raise
    `IngestionError` naming the row and column. Deterministic: identical
    bytes and schema yield an identical Dataset including row order.
    """
    reader = _open_csv(csv_source)
    try:
        header = next(iter(reader))
    except StopIteration:
        raise IngestionError("CSV source is empty (no header row)")

    positions: dict[str, int] = {}
    needed = [schema.treatment, schema.moderator, schema.outcome]
    if schema.survey_weight is not None:
        needed.append(schema.survey_weight)
    needed += [c.name for c in schema.covariates]
    for name in needed:
        if name not in header:
            raise IngestionError(f"declared column {name!r} not in CSV header")
        positions[name] = header.index(name)

    level_codes = {c.name: {lv: i for i, lv in enumerate(c.levels)}
                   for c in schema.covariates if c.kind == CATEGORICAL}

    t_vals: list[int] = []
    z_vals: list[int] = []
    y_vals: list[int] = []
    w_vals: list[float] = []
    cat_vals: dict[str, list[int]] = {c.name: [] for c in schema.covariates
                                      if c.kind == CATEGORICAL}
    con_vals: dict[str, list[float]] = {c.name: [] for c in schema.covariates
                                        if c.kind == CONTINUOUS}
    n_dropped = 0

    for row_no, record in enumerate(reader, start=1):
        if not record:
            continue
        if len(record) < len(header):
            raise IngestionError(
                f"row {row_no}: expected {len(header)} fields, got {len(record)}")
        cells = {name: record[pos].strip() for name, pos in positions.items()}
        if any(v in MISSING_MARKERS for v in cells.values()):
            n_dropped += 1
            continue

        t = _parse_binary(cells[schema.treatment], row_no, schema.treatment)
        z = _parse_binary(cells[schema.moderator], row_no, schema.moderator)
        y = _parse_binary(cells[schema.outcome], row_no, schema.outcome)

        if schema.survey_weight is None:
            w = 1.0
        else:
            try:
                w = float(cells[schema.survey_weight])
            except ValueError:
                raise IngestionError(
                    f"row {row_no}: column {schema.survey_weight!r} is not "
                    f"numeric: {cells[schema.survey_weight]!r}")
            if not np.isfinite(w) or w <= 0.0:
                raise IngestionError(
                    f"row {row_no}: column {schema.survey_weight!r} must be a "
                    f"finite positive weight, got {w!r}")

        parsed_cat = {}
        parsed_con = {}
        for spec in schema.covariates:
            raw = cells[spec.name]
            if spec.kind == CATEGORICAL:
                code = level_codes[spec.name].get(raw)
                if code is None:
                    raise IngestionError(
                        f"row {row_no}: column {spec.name!r} value {raw!r} is "
                        f"not a declared level")
                parsed_cat[spec.name] = code
            else:
                try:
                    x = float(raw)
                except ValueError:
                    raise IngestionError(
                        f"row {row_no}: column {spec.name!r} is not numeric: "
                        f"{raw!r}")
                if not np.isfinite(x):
                    raise IngestionError(
                        f"row {row_no}: column {spec.name!r} is not finite")
                parsed_con[spec.name] = x

        t_vals.append(t)
        z_vals.append(z)
        y_vals.append(y)
        w_vals.append(w)
        for k, v in parsed_cat.items():
            cat_vals[k].append(v)
        for k, v in parsed_con.items():
            con_vals[k].append(v)

    return Dataset(
        schema=schema,
        treatment=np.asarray(t_vals, dtype=np.int8),
        moderator=np.asarray(z_vals, dtype=np.int8),
        outcome=np.asarray(y_vals, dtype=np.int8),
        survey_weights=np.asarray(w_vals, dtype=np.float64),
        categorical={k: np.asarray(v, dtype=np.int64) for k, v in cat_vals.items()},
        continuous={k: np.asarray(v, dtype=np.float64) for k, v in con_vals.items()},
        n_dropped=n_dropped,
    )


def from_arrays(schema: SchemaConfig, treatment, moderator, outcome,
                survey_weights=None, categorical=None, continuous=None,
                n_dropped: int = 0) -> Dataset:
    """Build a Dataset directly from arrays (used by simulations and tests).

    Categorical covariates are passed as integer code arrays against the
    schema's declared levels.
    """
    t = np.asarray(treatment, dtype=np.int8)
    z = np.asarray(moderator, dtype=np.int8)
    y = np.asarray(outcome, dtype=np.int8)
    n = t.shape[0]
    if survey_weights is None:
        w = np.ones(n, dtype=np.float64)
    else:
        w = np.asarray(survey_weights, dtype=np.float64)
    for name, arr in (("treatment", t), ("moderator", z), ("outcome", y)):
        bad = ~np.isin(arr, (0, 1))
        if bad.any():
            raise IngestionError(f"{name} contains non-binary values")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise IngestionError("survey weights must be finite and positive")
    cat = {}
    con = {}
    for spec in schema.covariates:
        if spec.kind == CATEGORICAL:
            codes = np.asarray((categorical or {})[spec.name], dtype=np.int64)
            if codes.min(initial=0) < 0 or codes.max(initial=0) >= len(spec.levels):
                raise IngestionError(f"covariate {spec.name!r}: code out of range")
            cat[spec.name] = codes
        else:
            con[spec.name] = np.asarray((continuous or {})[spec.name],
                                        dtype=np.float64)
    return Dataset(schema=schema, treatment=t, moderator=z, outcome=y,
                   survey_weights=w, categorical=cat, continuous=con,
                   n_dropped=n_dropped)


def stratify(ds: Dataset, z: int) -> Dataset:
    """Rows with moderator == z; raises `EmptyStratumError` when none."""
    if z not in (0, 1):
        raise ValueError("moderator level must be 0 or 1")
    index = np.flatnonzero(ds.moderator == z)
    if index.size == 0:
        raise EmptyStratumError(f"no rows with moderator == {z}")
    return ds.take(index)


def stratum_index(ds: Dataset, z: int) -> np.ndarray:
    """Positions of the rows belonging to moderator level z."""
    return np.flatnonzero(ds.moderator == z)


def encode(ds: Dataset, include_moderator: bool = False) -> DesignMatrix:
    """One-hot design matrix, first declared level dropped as reference.

    Column order is deterministic: covariates in schema order, levels in
    declared order, then the moderator column when `include_moderator`
    (pooled-fit mode). Labels are "<covariate>=<level>" for indicators and
    the bare covariate name for continuous columns.
    """
    cols: list[np.ndarray] = []
    labels: list[str] = []
    columns: list[tuple[str, str | None]] = []
    for spec in ds.schema.covariates:
        if spec.kind == CATEGORICAL:
            codes = ds.categorical[spec.name]
            for code, level in enumerate(spec.levels):
                if code == 0:
                    continue  # reference level
                cols.append((codes == code).astype(np.float64))
                labels.append(f"{spec.name}={level}")
                columns.append((spec.name, level))
        else:
            cols.append(ds.continuous[spec.name].astype(np.float64))
            labels.append(spec.name)
            columns.append((spec.name, None))
    if include_moderator:
        cols.append(ds.moderator.astype(np.float64))
        labels.append(ds.schema.moderator)
        columns.append((ds.schema.moderator, None))
    matrix = np.column_stack(cols) if cols else np.empty((ds.n_rows, 0))
    return DesignMatrix(matrix=matrix, labels=tuple(labels),
                        columns=tuple(columns))
