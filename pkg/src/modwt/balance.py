"""Weighted covariate-balance statistics and pre/post-weighting tables.

Balance is summarized per moderator stratum with two statistics per
covariate level: a standardized mean difference (SMD) and a weighted
Kolmogorov-Smirnov (KS) statistic, both flagged above 0.10. The SMD
denominator is the survey-weighted standard deviation of the full stratum
sample, computed once and reused for the pre- and post-weighting phases so
the two phases are directly comparable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .data import CATEGORICAL, Dataset
from .errors import DegenerateBalanceError

if TYPE_CHECKING:  # pragma: no cover
    from .boosting import PropensityFit

# Flagging threshold for |SMD| and KS after weighting.
BALANCE_THRESHOLD = 0.10

CONTINUOUS_LEVEL = "-"


def weighted_mean(x: np.ndarray, w: np.ndarray) -> float:
    return float(np.dot(w, x) / np.sum(w))


def weighted_var(x: np.ndarray, w: np.ndarray) -> float:
    """Population-style weighted variance, sum(w*(x-m)^2)/sum(w)."""
    m = weighted_mean(x, w)
    d = x - m
    return float(np.dot(w, d * d) / np.sum(w))


def weighted_smd(x: np.ndarray, t: np.ndarray, w: np.ndarray,
                 denom_weights: np.ndarray | None = None) -> float:
    """Standardized mean difference (treated minus control), sign preserved.

    Group means use `w`; the pooled standard deviation in the denominator
    uses `denom_weights` over the full sample (defaults to `w`). Passing the
    pre-weighting survey weights as `denom_weights` keeps pre- and
    post-weighting SMDs on a common scale.

    Raises `DegenerateBalanceError` when the pooled SD is zero but the group
    means differ; returns 0.0 when both are zero.
    """
    x = np.asarray(x, dtype=np.float64)
    treated = np.asarray(t) == 1
    if not treated.any() or treated.all():
        raise ValueError("both treatment groups must be nonempty")
    mean_t = weighted_mean(x[treated], w[treated])
    mean_c = weighted_mean(x[~treated], w[~treated])
    dw = w if denom_weights is None else denom_weights
    sd_pool = float(np.sqrt(weighted_var(x, dw)))
    diff = mean_t - mean_c
    if sd_pool == 0.0:
        if diff == 0.0:
            return 0.0
        raise DegenerateBalanceError(
            "pooled SD is zero but group means differ; SMD undefined")
    return diff / sd_pool


def weighted_ks(x: np.ndarray, t: np.ndarray, w: np.ndarray,
                order: np.ndarray | None = None) -> float:
    """Weighted two-sample KS statistic.

    Maximum absolute difference between the treated and control weighted
    empirical CDFs (right-continuous, weights normalized within group),
    evaluated at every distinct value of `x`. For a 0/1 indicator this
    equals the absolute weighted proportion difference exactly.

    `order` may carry a precomputed stable argsort of `x`; callers that
    evaluate many weight vectors against fixed columns pass it to avoid
    re-sorting (the result is bit-identical either way).
    """
    x = np.asarray(x, dtype=np.float64)
    treated = np.asarray(t) == 1
    if not treated.any() or treated.all():
        raise ValueError("both treatment groups must be nonempty")
    if order is None:
        order = np.argsort(x, kind="stable")
    xs = x[order]
    ws = w[order]
    ts = treated[order]
    wt = np.where(ts, ws, 0.0)
    wc = np.where(ts, 0.0, ws)
    cum_t = np.cumsum(wt)
    cum_c = np.cumsum(wc)
    # evaluate the ECDF difference only at the last index of each tied run
    last = np.empty(xs.shape[0], dtype=bool)
    last[:-1] = xs[1:] != xs[:-1]
    last[-1] = True
    f_t = cum_t[last] / cum_t[-1]
    f_c = cum_c[last] / cum_c[-1]
    return float(np.max(np.abs(f_t - f_c)))


@dataclass(frozen=True)
class BalanceRow:
    """Balance statistics for one covariate level in one phase/stratum."""

    covariate: str
    level: str
    phase: str  # "pre" or "post"
    stratum: str
    mean_treated: float
    mean_control: float
    smd: float
    ks: float

    @property
    def flag_smd(self) -> bool:
        return abs(self.smd) > BALANCE_THRESHOLD

    @property
    def flag_ks(self) -> bool:
        return self.ks > BALANCE_THRESHOLD


@dataclass(frozen=True)
class BalanceTable:
    """All balance rows plus per (stratum, phase) maxima."""

    rows: tuple[BalanceRow, ...]

    def subset(self, stratum: str | None = None,
               phase: str | None = None) -> tuple[BalanceRow, ...]:
        return tuple(r for r in self.rows
                     if (stratum is None or r.stratum == stratum)
                     and (phase is None or r.phase == phase))

    def max_abs_smd(self, stratum: str | None = None,
                    phase: str | None = None) -> float:
        return max(abs(r.smd) for r in self.subset(stratum, phase))

    def max_ks(self, stratum: str | None = None,
               phase: str | None = None) -> float:
        return max(r.ks for r in self.subset(stratum, phase))

    @property
    def strata(self) -> tuple[str, ...]:
        seen: list[str] = []
        for r in self.rows:
            if r.stratum not in seen:
                seen.append(r.stratum)
        return tuple(seen)

    def summary(self) -> dict[tuple[str, str], dict[str, float]]:
        out: dict[tuple[str, str], dict[str, float]] = {}
        for stratum in self.strata:
            for phase in ("pre", "post"):
                out[(stratum, phase)] = {
                    "max_abs_smd": self.max_abs_smd(stratum, phase),
                    "max_ks": self.max_ks(stratum, phase),
                }
        return out


def _balance_columns(ds: Dataset) -> list[tuple[str, str, np.ndarray]]:
    """(covariate, level, values) for every reportable column.

    Categorical covariates contribute one indicator per level, including
    the reference level; continuous covariates contribute themselves.
    """
    cols = []
    for spec in ds.schema.covariates:
        if spec.kind == CATEGORICAL:
            codes = ds.categorical[spec.name]
            for code, level in enumerate(spec.levels):
                cols.append((spec.name, level,
                             (codes == code).astype(np.float64)))
        else:
            cols.append((spec.name, CONTINUOUS_LEVEL,
                         ds.continuous[spec.name]))
    return cols


def _fit_substrata(ds: Dataset, fit) -> list[tuple[str, np.ndarray, np.ndarray]]:
    """(stratum label, dataset row positions, composite weights) per stratum.

    A pooled fit covers both moderator levels with one weight vector;
    balance is still assessed within each level, so its rows are split by
    the observed moderator.
    """
    if fit.stratum == "pooled":
        out = []
        for z in (0, 1):
            mask = ds.moderator[fit.row_index] == z
            if mask.any():
                out.append((str(z), fit.row_index[mask],
                            fit.composite_weights[mask]))
        return out
    return [(fit.stratum, fit.row_index, fit.composite_weights)]


def balance_table(ds: Dataset, fits: Sequence["PropensityFit"]) -> BalanceTable:
    """Pre- and post-weighting balance rows for every covariate level.

    Pre-phase rows weight both arms by survey weights alone; post-phase
    rows use the fit's composite weights. The SMD denominator is the
    survey-weighted SD of the full stratum sample in both phases.
    """
    rows: list[BalanceRow] = []
    for fit in fits:
        for stratum, idx, composite in _fit_substrata(ds, fit):
            sub = ds.take(idx)
            t = sub.treatment
            survey = sub.survey_weights
            for covariate, level, values in _balance_columns(sub):
                for phase, w in (("pre", survey), ("post", composite)):
                    treated = t == 1
                    rows.append(BalanceRow(
                        covariate=covariate,
                        level=level,
                        phase=phase,
                        stratum=stratum,
                        mean_treated=weighted_mean(values[treated], w[treated]),
                        mean_control=weighted_mean(values[~treated], w[~treated]),
                        smd=weighted_smd(values, t, w, denom_weights=survey),
                        ks=weighted_ks(values, t, w),
                    ))
    return BalanceTable(rows=tuple(rows))
