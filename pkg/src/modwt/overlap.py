"""Covariate overlap audit across treatment groups within moderator levels.

Positivity requires every covariate pattern to have a chance of landing in
either treatment arm within each moderator level. For categorical
covariates the audit looks for empty (level x treatment x moderator)
cells; for continuous covariates it compares observed supports and flags
an arm whose values lie entirely outside the other arm's range within a
stratum. The audit only reports; trimming is out of scope.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .data import CATEGORICAL, Dataset


@dataclass(frozen=True)
class ContingencyTable:
    """Counts and survey-weighted column proportions for one categorical
    covariate, cross-classified by (level x treatment x moderator).

    counts[i, t, z] is the number of rows at level i with treatment t and
    moderator z; proportions normalize the weighted counts within each
    (t, z) column, matching how baseline tables are usually read.
    """

    covariate: str
    levels: tuple[str, ...]
    counts: np.ndarray       # (L, 2, 2) ints
    weighted: np.ndarray     # (L, 2, 2) summed survey weights
    proportions: np.ndarray  # (L, 2, 2) weighted, column-normalized

    def __post_init__(self):
        for arr in (self.counts, self.weighted, self.proportions):
            arr.setflags(write=False)

    def empty_cells(self) -> list[tuple[str, int, int]]:
        out = []
        for i, level in enumerate(self.levels):
            for t in (0, 1):
                for z in (0, 1):
                    if self.counts[i, t, z] == 0:
                        out.append((level, t, z))
        return out


def crosstab(ds: Dataset, covariate: str) -> ContingencyTable:
    """Contingency summary of one categorical covariate by (T, Z)."""
    spec = ds.covariate_spec(covariate)
    if spec.kind != CATEGORICAL:
        raise ValueError(f"covariate {covariate!r} is not categorical")
    codes = ds.categorical[covariate]
    n_levels = len(spec.levels)
    counts = np.zeros((n_levels, 2, 2), dtype=np.int64)
    weighted = np.zeros((n_levels, 2, 2), dtype=np.float64)
    for t in (0, 1):
        for z in (0, 1):
            mask = (ds.treatment == t) & (ds.moderator == z)
            counts[:, t, z] = np.bincount(codes[mask], minlength=n_levels)
            weighted[:, t, z] = np.bincount(codes[mask],
                                            weights=ds.survey_weights[mask],
                                            minlength=n_levels)
    col_totals = weighted.sum(axis=0, keepdims=True)
    with np.errstate(invalid="ignore"):
        proportions = np.where(col_totals > 0, weighted / col_totals, 0.0)
    return ContingencyTable(covariate=covariate, levels=spec.levels,
                            counts=counts, weighted=weighted,
                            proportions=proportions)


@dataclass(frozen=True)
class ContinuousSummary:
    """Support summary of one continuous covariate per (T, Z) cell."""

    covariate: str
    # keys are (t, z); values are dicts with n, min, p01, p25, p50, p75, p99, max
    cells: dict

    def quantile_gap(self, z: int) -> float | None:
        """Gap between the arms' [p01, p99] ranges within stratum z."""
        a = self.cells.get((1, z))
        b = self.cells.get((0, z))
        if a is None or b is None or a["n"] == 0 or b["n"] == 0:
            return None
        gap = max(a["p01"] - b["p99"], b["p01"] - a["p99"])
        return max(gap, 0.0)


@dataclass(frozen=True)
class OverlapReport:
    """Full-audit result consumed by the pipeline gate.

    empty_cells: (covariate, level, treatment, moderator) combinations with
    zero rows. range_violations: (covariate, treatment=1, moderator,
    direction) where the treated arm's observed support lies entirely
    above/below the control arm's [min, max] within that stratum.
    """

    tables: tuple[ContingencyTable, ...]
    continuous: tuple[ContinuousSummary, ...]
    empty_cells: tuple[tuple[str, str, int, int], ...]
    range_violations: tuple[tuple[str, int, int, str], ...]

    @property
    def ok(self) -> bool:
        return not self.empty_cells and not self.range_violations

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "empty_cells": [
                {"covariate": c, "level": lv, "treatment": t, "moderator": z}
                for c, lv, t, z in self.empty_cells
            ],
            "range_violations": [
                {"covariate": c, "treatment": t, "moderator": z, "direction": d}
                for c, t, z, d in self.range_violations
            ],
            "categorical": [
                {
                    "covariate": tab.covariate,
                    "levels": list(tab.levels),
                    "counts": tab.counts.tolist(),
                    "weighted_proportions": np.round(tab.proportions, 10).tolist(),
                }
                for tab in self.tables
            ],
            "continuous": [
                {
                    "covariate": cs.covariate,
                    "cells": [
                        {"treatment": t, "moderator": z, **stats}
                        for (t, z), stats in sorted(cs.cells.items())
                    ],
                    "quantile_gaps": {str(z): cs.quantile_gap(z)
                                      for z in (0, 1)},
                }
                for cs in self.continuous
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        lines = ["Covariate overlap audit", "=" * 60]
        for tab in self.tables:
            lines.append("")
            lines.append(f"{tab.covariate} (counts by treatment x moderator)")
            header = f"  {'level':<28}" + "".join(
                f"T={t},Z={z}".rjust(10) for t in (0, 1) for z in (0, 1))
            lines.append(header)
            for i, level in enumerate(tab.levels):
                cells = "".join(
                    f"{tab.counts[i, t, z]:>10d}" for t in (0, 1) for z in (0, 1))
                lines.append(f"  {level:<28}{cells}")
        for cs in self.continuous:
            lines.append("")
            lines.append(f"{cs.covariate} (continuous support by cell)")
            for (t, z), st in sorted(cs.cells.items()):
                if st["n"] == 0:
                    lines.append(f"  T={t},Z={z}: n=0")
                    continue
                lines.append(
                    f"  T={t},Z={z}: n={st['n']} min={st['min']:.4g} "
                    f"p01={st['p01']:.4g} p99={st['p99']:.4g} max={st['max']:.4g}")
            for z in (0, 1):
                gap = cs.quantile_gap(z)
                if gap is not None and gap > 0:
                    lines.append(f"  Z={z}: gap of {gap:.4g} between the arms' "
                                 f"[p01, p99] ranges")
        lines.append("")
        if self.empty_cells:
            lines.append("EMPTY CELLS:")
            for c, lv, t, z in self.empty_cells:
                lines.append(f"  {c}={lv} has no rows with T={t}, Z={z}")
        if self.range_violations:
            lines.append("RANGE VIOLATIONS:")
            for c, t, z, d in self.range_violations:
                lines.append(
                    f"  {c}: treated support lies entirely {d} control "
                    f"support within Z={z}")
        if self.ok:
            lines.append("No empty cells or range violations detected.")
        return "\n".join(lines) + "\n"


def _continuous_summary(ds: Dataset, name: str) -> ContinuousSummary:
    values = ds.continuous[name]
    cells = {}
    for t in (0, 1):
        for z in (0, 1):
            mask = (ds.treatment == t) & (ds.moderator == z)
            v = values[mask]
            if v.size == 0:
                cells[(t, z)] = {"n": 0, "min": None, "p01": None, "p25": None,
                                 "p50": None, "p75": None, "p99": None,
                                 "max": None}
                continue
            q = np.quantile(v, [0.01, 0.25, 0.50, 0.75, 0.99])
            cells[(t, z)] = {
                "n": int(v.size),
                "min": float(v.min()),
                "p01": float(q[0]), "p25": float(q[1]), "p50": float(q[2]),
                "p75": float(q[3]), "p99": float(q[4]),
                "max": float(v.max()),
            }
    return ContinuousSummary(covariate=name, cells=cells)


def overlap_report(ds: Dataset) -> OverlapReport:
    """Audit every schema covariate; row-order invariant."""
    tables = []
    continuous = []
    empty: list[tuple[str, str, int, int]] = []
    violations: list[tuple[str, int, int, str]] = []
    for spec in ds.schema.covariates:
        if spec.kind == CATEGORICAL:
            tab = crosstab(ds, spec.name)
            tables.append(tab)
            for level, t, z in tab.empty_cells():
                empty.append((spec.name, level, t, z))
        else:
            cs = _continuous_summary(ds, spec.name)
            continuous.append(cs)
            for z in (0, 1):
                treated = cs.cells.get((1, z))
                control = cs.cells.get((0, z))
                if not treated or not control or treated["n"] == 0 or control["n"] == 0:
                    continue
                if treated["min"] > control["max"]:
                    violations.append((spec.name, 1, z, "above"))
                elif treated["max"] < control["min"]:
                    violations.append((spec.name, 1, z, "below"))
    return OverlapReport(tables=tuple(tables), continuous=tuple(continuous),
                         empty_cells=tuple(empty),
                         range_violations=tuple(violations))
