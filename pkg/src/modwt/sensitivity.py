"""Omitted-variable sensitivity simulation on an (effect size, correlation)
grid.

For each cell, a synthetic confounder U is drawn with a prescribed
standardized mean difference between treatment arms (es) and correlation
with the outcome-model residuals (rho), both measured in the stratum's
weighted sample. The propensity model is then updated by a fast
single-covariate logistic step: U's coefficient is estimated with the
baseline logit score as a fixed offset, so a zero-information U leaves the
propensities untouched. Weights are rebuilt and the stratum's outcome
model is refit with U as an extra covariate. Cells average the
re-estimated risk difference and its p-value over seeded replicates;
observed covariates are placed on the same axes as benchmark points.

The construction writes U = a*r + d*T + nu*eps over standardized residuals
r, standardized treatment T, and noise eps orthogonalized against both.
(a, d) solve a 2x2 system so the realized weighted correlation and SMD hit
(rho, es) exactly; cells where no unit-variance solution exists
(1 - a^2 - d^2 - 2*a*d*corr(r,T) < 0) are marked infeasible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit
from scipy.stats import norm

from . import balance
from .boosting import PROPENSITY_CLAMP, PropensityFit, ate_weights
from .data import CATEGORICAL, Dataset
from .errors import ConfigError, EstimationError, SeparationError
from .outcome import (OutcomeDesign, build_outcome_design,
                      fit_weighted_logistic, g_computation)


def _default_es_grid() -> tuple[float, ...]:
    return tuple(round(-0.80 + 0.05 * i, 10) for i in range(33))


def _default_rho_grid() -> tuple[float, ...]:
    return tuple(round(0.05 * i, 10) for i in range(9))


@dataclass(frozen=True)
class SensitivityConfig:
    """Grid layout and replicate budget for the sensitivity simulation.

    es_grid=None selects the symmetric default -0.80..0.80 in steps of
    0.05; rho_grid defaults to 0..0.40 in steps of 0.05.
    """

    es_grid: tuple[float, ...] | None = None
    rho_grid: tuple[float, ...] = None  # type: ignore[assignment]
    n_reps: int = 100
    p_contours: tuple[float, ...] = (0.05,)
    seed: int = 0

    def __post_init__(self):
        if self.es_grid is None:
            object.__setattr__(self, "es_grid", _default_es_grid())
        else:
            object.__setattr__(self, "es_grid", tuple(float(v) for v in self.es_grid))
        if self.rho_grid is None:
            object.__setattr__(self, "rho_grid", _default_rho_grid())
        else:
            object.__setattr__(self, "rho_grid",
                               tuple(float(v) for v in self.rho_grid))
        if not self.es_grid or not self.rho_grid:
            raise ConfigError("sensitivity grids must be nonempty")
        if any(not 0.0 <= r < 1.0 for r in self.rho_grid):
            raise ConfigError("rho grid values must lie in [0, 1)")
        if self.n_reps < 1:
            raise ConfigError("n_reps must be at least 1")
        if any(not 0.0 < p < 1.0 for p in self.p_contours):
            raise ConfigError("p_contours must lie in (0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> "SensitivityConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(
                f"unknown sensitivity config keys: {sorted(unknown)}")
        d = dict(d)
        if "es_grid" in d and d["es_grid"] is not None:
            d["es_grid"] = tuple(d["es_grid"])
        if "rho_grid" in d and d["rho_grid"] is not None:
            d["rho_grid"] = tuple(d["rho_grid"])
        if "p_contours" in d:
            d["p_contours"] = tuple(d["p_contours"])
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "es_grid": list(self.es_grid),
            "rho_grid": list(self.rho_grid),
            "n_reps": self.n_reps,
            "p_contours": list(self.p_contours),
            "seed": self.seed,
        }


def _standardize(x: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, float]:
    mean = balance.weighted_mean(x, w)
    sd = float(np.sqrt(balance.weighted_var(x, w)))
    if sd < 1e-12:
        return np.zeros_like(x, dtype=np.float64), 0.0
    return (x - mean) / sd, sd


def simulate_omitted_variable(residuals: np.ndarray, treatment: np.ndarray,
                              weights: np.ndarray, es: float, rho: float,
                              rep_seed) -> np.ndarray | None:
    """Draw one synthetic confounder hitting (es, rho) in the weighted sample.

    Returns a vector with weighted mean 0 and SD 1 whose weighted SMD
    between treatment arms equals `es` and whose weighted correlation with
    `residuals` equals `rho`, or None when the combination is infeasible
    (no unit-variance construction exists). Bit-identical for a fixed
    rep_seed.
    """
    t = np.asarray(treatment, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    r_std, r_sd = _standardize(np.asarray(residuals, dtype=np.float64), w)
    t_std, t_sd = _standardize(t, w)
    if t_sd == 0.0:
        raise EstimationError("treatment has no variation in this stratum")
    if r_sd == 0.0 and rho != 0.0:
        return None
    c = balance.weighted_mean(r_std * t_std, w)  # corr of standardized vectors

    # target moments: corr(U, r) = a + d*c = rho ; smd(U) = (a*c + d)/t_sd = es
    det = 1.0 - c * c
    if det <= 1e-12:
        return None
    b1, b2 = rho, es * t_sd
    a = (b1 - c * b2) / det
    d = (b2 - c * b1) / det
    nu_sq = 1.0 - (a * a + d * d + 2.0 * a * d * c)
    if nu_sq < -1e-12:
        return None
    nu = float(np.sqrt(max(nu_sq, 0.0)))

    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(rep_seed)))
    eps = rng.standard_normal(t.shape[0])
    # orthogonalize the noise against {1, r, T} in the weighted inner product
    basis = np.column_stack([np.ones_like(t), r_std, t_std])
    wb = basis * w[:, None]
    gram = basis.T @ wb
    coef = np.linalg.lstsq(gram, wb.T @ eps, rcond=None)[0]
    eps_perp = eps - basis @ coef
    eps_std, eps_sd = _standardize(eps_perp, w)
    if eps_sd == 0.0 and nu > 0.0:
        return None
    return a * r_std + d * t_std + nu * eps_std


@dataclass(frozen=True)
class _StratumContext:
    """Precomputed ingredients for repeated refits within one stratum."""

    stratum: str
    treatment: np.ndarray
    outcome: np.ndarray
    survey: np.ndarray
    composite: np.ndarray
    base_logit: np.ndarray
    design: OutcomeDesign          # intercept, T, covariates (no moderator)
    residuals: np.ndarray
    baseline_estimate: float
    baseline_se: float
    baseline_p: float


def _rd_with_p(beta, cov, design: OutcomeDesign, w) -> tuple[float, float, float]:
    rd, grad = g_computation(beta, design, None, w)
    se = float(np.sqrt(grad @ cov @ grad))
    z = rd / se if se > 0 else 0.0
    return rd, se, float(2.0 * norm.sf(abs(z)))


def _make_context(ds: Dataset, stratum: str, row_index: np.ndarray,
                  propensities: np.ndarray,
                  composite: np.ndarray) -> _StratumContext:
    sub = ds.take(row_index)
    design = build_outcome_design(sub, include_moderator=False)
    fit = fit_weighted_logistic(design, sub.outcome, composite)
    rd, se, p_val = _rd_with_p(fit.coefficients, fit.covariance, design, composite)
    fitted = expit(design.matrix @ fit.coefficients)
    return _StratumContext(
        stratum=stratum,
        treatment=sub.treatment.astype(np.float64),
        outcome=sub.outcome.astype(np.float64),
        survey=sub.survey_weights,
        composite=composite,
        base_logit=logit(np.clip(propensities, PROPENSITY_CLAMP,
                                 1.0 - PROPENSITY_CLAMP)),
        design=design,
        residuals=sub.outcome - fitted,
        baseline_estimate=rd,
        baseline_se=se,
        baseline_p=p_val,
    )


def _offset_logistic_coef(offset: np.ndarray, u: np.ndarray, t: np.ndarray,
                          w: np.ndarray) -> float:
    """Survey-weighted MLE of U's coefficient with the base score as offset.

    One-dimensional Newton iteration; gamma = 0 is exact when U carries no
    information about treatment, which anchors the grid origin at the
    baseline analysis.
    """
    w = w / w.mean()
    n = t.shape[0]
    gamma = 0.0
    for _ in range(50):
        eta = offset + gamma * u
        if np.max(np.abs(eta)) > 35.0:
            raise SeparationError("propensity update diverged; U separates "
                                  "the treatment groups")
        p = expit(eta)
        score = float(np.dot(w, (t - p) * u))
        if abs(score) / n < 1e-12:
            break
        info = float(np.dot(w, p * (1.0 - p) * u * u))
        if info <= 0.0:
            break
        step = np.clip(score / info, -5.0, 5.0)
        gamma += step
        if abs(step) < 1e-14:
            break
    return gamma


def _adjusted_effect(ctx: _StratumContext, u: np.ndarray) -> tuple[float, float]:
    """Re-estimated (risk difference, p) with U added to both models."""
    gamma = _offset_logistic_coef(ctx.base_logit, u, ctx.treatment, ctx.survey)
    p_new = np.clip(expit(ctx.base_logit + gamma * u), PROPENSITY_CLAMP,
                    1.0 - PROPENSITY_CLAMP)
    w_new = ate_weights(p_new, ctx.treatment) * ctx.survey
    design_u = ctx.design.with_column(u, "u")
    fit = fit_weighted_logistic(design_u, ctx.outcome, w_new)
    rd, _, p_val = _rd_with_p(fit.coefficients, fit.covariance, design_u, w_new)
    return rd, p_val


def adjusted_effect(ds: Dataset, base_fit: PropensityFit,
                    u: np.ndarray) -> tuple[float, float]:
    """One-off re-estimation with a caller-supplied confounder vector.

    `u` aligns with base_fit.row_index. The propensity update regresses
    treatment on the baseline logit score and u (survey-weighted), weights
    are rebuilt, and the stratum outcome model is refit with u appended.
    """
    ctx = _make_context(ds, base_fit.stratum, base_fit.row_index,
                        base_fit.propensities, base_fit.composite_weights)
    return _adjusted_effect(ctx, u)


@dataclass(frozen=True)
class BenchmarkPoint:
    """Observed covariate level placed on the sensitivity axes."""

    covariate: str
    level: str
    es: float
    rho: float


@dataclass(frozen=True)
class SensitivityGrid:
    """Complete (es, rho) lattice of averaged re-estimates for one stratum.

    mean_estimate/mean_p are (n_es, n_rho) arrays, NaN where a cell is
    infeasible or every replicate failed; n_ok + n_failed accounts for all
    attempted replicates (both zero only for infeasible cells).
    """

    stratum: str
    es_grid: tuple[float, ...]
    rho_grid: tuple[float, ...]
    mean_estimate: np.ndarray
    mean_p: np.ndarray
    n_ok: np.ndarray
    n_failed: np.ndarray
    infeasible: np.ndarray
    baseline_estimate: float
    baseline_se: float
    baseline_p: float
    benchmarks: tuple[BenchmarkPoint, ...]

    def __post_init__(self):
        for arr in (self.mean_estimate, self.mean_p, self.n_ok,
                    self.n_failed, self.infeasible):
            arr.setflags(write=False)


def _weighted_corr(x: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    sx = float(np.sqrt(balance.weighted_var(x, w)))
    sy = float(np.sqrt(balance.weighted_var(y, w)))
    if sx == 0.0 or sy == 0.0:
        return 0.0
    mx = balance.weighted_mean(x, w)
    my = balance.weighted_mean(y, w)
    cov = balance.weighted_mean((x - mx) * (y - my), w)
    return cov / (sx * sy)


def benchmark_points(ds: Dataset) -> tuple[BenchmarkPoint, ...]:
    """(|SMD| vs treatment, |corr| with outcome) for every covariate level.

    Both statistics use survey weights; categorical covariates contribute
    one point per level (indicator columns), continuous covariates one
    point each.
    """
    t = ds.treatment
    y = ds.outcome.astype(np.float64)
    w = ds.survey_weights
    points = []
    for spec in ds.schema.covariates:
        if spec.kind == CATEGORICAL:
            columns = [(spec.name, level, ds.level_indicator(spec.name, level))
                       for level in spec.levels]
        else:
            columns = [(spec.name, balance.CONTINUOUS_LEVEL,
                        ds.continuous[spec.name])]
        for name, level, values in columns:
            points.append(BenchmarkPoint(
                covariate=name, level=level,
                es=abs(balance.weighted_smd(values, t, w)),
                rho=abs(_weighted_corr(values, y, w)),
            ))
    return tuple(points)


def _substrata(ds: Dataset, fit: PropensityFit):
    if fit.stratum == "pooled":
        for z in (0, 1):
            mask = ds.moderator[fit.row_index] == z
            if mask.any():
                yield (str(z), fit.row_index[mask], fit.propensities[mask],
                       fit.composite_weights[mask])
    else:
        yield fit.stratum, fit.row_index, fit.propensities, fit.composite_weights


def ov_grid(ds: Dataset, fits: list[PropensityFit],
            cfg: SensitivityConfig) -> dict[str, SensitivityGrid]:
    """Run the sensitivity simulation for every moderator stratum.

    Replicate seeds derive from (cfg.seed, stratum level, es index, rho
    index, rep), so the output is bit-identical regardless of evaluation
    order.
    """
    grids: dict[str, SensitivityGrid] = {}
    for fit in fits:
        for stratum, idx, props, composite in _substrata(ds, fit):
            ctx = _make_context(ds, stratum, idx, props, composite)
            grids[stratum] = _grid_for_stratum(ds, ctx, idx, cfg)
    return grids


def _grid_for_stratum(ds: Dataset, ctx: _StratumContext, row_index: np.ndarray,
                      cfg: SensitivityConfig) -> SensitivityGrid:
    n_es, n_rho = len(cfg.es_grid), len(cfg.rho_grid)
    mean_est = np.full((n_es, n_rho), np.nan)
    mean_p = np.full((n_es, n_rho), np.nan)
    n_ok = np.zeros((n_es, n_rho), dtype=np.int64)
    n_failed = np.zeros((n_es, n_rho), dtype=np.int64)
    infeasible = np.zeros((n_es, n_rho), dtype=bool)
    stratum_key = int(ctx.stratum)
    seed_root = int(cfg.seed) & 0xFFFFFFFFFFFFFFFF

    for ie, es in enumerate(cfg.es_grid):
        for ir, rho in enumerate(cfg.rho_grid):
            ests: list[float] = []
            ps: list[float] = []
            failed = 0
            cell_infeasible = False
            for rep in range(cfg.n_reps):
                u = simulate_omitted_variable(
                    ctx.residuals, ctx.treatment, ctx.composite, es, rho,
                    (seed_root, stratum_key, ie, ir, rep))
                if u is None:
                    cell_infeasible = True
                    break
                try:
                    est, p_val = _adjusted_effect(ctx, u)
                except EstimationError:
                    failed += 1
                    continue
                ests.append(est)
                ps.append(p_val)
            infeasible[ie, ir] = cell_infeasible
            if cell_infeasible:
                continue
            n_ok[ie, ir] = len(ests)
            n_failed[ie, ir] = failed
            if ests:
                mean_est[ie, ir] = float(np.mean(ests))
                mean_p[ie, ir] = float(np.mean(ps))
    return SensitivityGrid(
        stratum=ctx.stratum,
        es_grid=cfg.es_grid,
        rho_grid=cfg.rho_grid,
        mean_estimate=mean_est,
        mean_p=mean_p,
        n_ok=n_ok,
        n_failed=n_failed,
        infeasible=infeasible,
        baseline_estimate=ctx.baseline_estimate,
        baseline_se=ctx.baseline_se,
        baseline_p=ctx.baseline_p,
        benchmarks=benchmark_points(ds.take(row_index)),
    )
