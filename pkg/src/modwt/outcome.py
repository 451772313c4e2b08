"""Doubly robust weighted-logistic outcome models and moderated effects.

The outcome model regresses the binary outcome on treatment, moderator,
their interaction, and the propensity-model covariates, weighted by the
composite (propensity x survey) weights. Standard errors come from a
design-based sandwich covariance that treats the weights as fixed.
Moderated treatment effects are risk differences obtained by g-computation:
average the predicted-probability contrast between the two treatment
assignments with the moderator counterfactually fixed, with delta-method
standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset, encode
from .errors import ConvergenceError, EstimationError, RankDeficiencyError, SeparationError

MAX_IRLS_ITERATIONS = 100
SCORE_TOL = 1e-10          # on max |score| / n
DEVIANCE_RTOL = 1e-12      # on relative deviance change
_ETA_SEPARATION = 20.0     # |linear predictor| beyond this means pinned fits

WALD_Z = 1.96  # normal 95% multiplier


@dataclass(frozen=True)
class OutcomeDesign:
    """Design matrix for the outcome model with named column roles.

    Column order is deterministic: intercept, treatment, moderator,
    treatment x moderator, then the encoded covariates. The moderator and
    interaction columns are absent for within-stratum models
    (z_col / tz_col None).
    """

    matrix: np.ndarray
    labels: tuple[str, ...]
    t_col: int
    z_col: int | None
    tz_col: int | None

    def __post_init__(self):
        self.matrix.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return int(self.matrix.shape[0])

    def with_column(self, values: np.ndarray, label: str) -> "OutcomeDesign":
        """Append one covariate column (used for sensitivity refits)."""
        return OutcomeDesign(
            matrix=np.column_stack([self.matrix, values]),
            labels=self.labels + (label,),
            t_col=self.t_col, z_col=self.z_col, tz_col=self.tz_col,
        )


def build_outcome_design(ds: Dataset, include_moderator: bool = True) -> OutcomeDesign:
    """Assemble intercept, T, (Z, T*Z,) and encoded covariates."""
    x = encode(ds, include_moderator=False)
    t = ds.treatment.astype(np.float64)
    cols = [np.ones(ds.n_rows), t]
    labels = ["intercept", ds.schema.treatment]
    z_col = tz_col = None
    if include_moderator:
        z = ds.moderator.astype(np.float64)
        cols += [z, t * z]
        labels += [ds.schema.moderator,
                   f"{ds.schema.treatment}:{ds.schema.moderator}"]
        z_col, tz_col = 2, 3
    matrix = np.column_stack(cols + [x.matrix]) if x.n_cols else np.column_stack(cols)
    return OutcomeDesign(matrix=matrix, labels=tuple(labels) + x.labels,
                         t_col=1, z_col=z_col, tz_col=tz_col)


@dataclass(frozen=True)
class OutcomeFit:
    """Converged weighted-logistic fit with sandwich covariance."""

    coefficients: np.ndarray
    covariance: np.ndarray
    labels: tuple[str, ...]
    t_col: int
    z_col: int | None
    tz_col: int | None
    n: int
    weighted_n: float
    n_iterations: int
    final_step_norm: float
    deviance: float

    def __post_init__(self):
        self.coefficients.setflags(write=False)
        self.covariance.setflags(write=False)

    def standard_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))


def _check_rank(X: np.ndarray, labels) -> None:
    r = np.linalg.qr(X, mode="r")
    diag = np.abs(np.diag(r))
    tol = max(X.shape) * np.finfo(np.float64).eps * (diag.max() if diag.size else 0.0)
    if (diag > tol).all():
        return
    # pivoted QR names the columns that add no rank
    _, _, piv = linalg.qr(X, pivoting=True, mode="economic")
    rank = int((diag > tol).sum())
    aliased = sorted(labels[j] for j in piv[rank:])
    raise RankDeficiencyError(f"design is rank deficient; aliased columns: {aliased}")


def _deviance(y: np.ndarray, p: np.ndarray, w: np.ndarray) -> float:
    p = np.clip(p, 1e-300, 1.0 - 1e-16)
    return float(-2.0 * np.sum(w * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def irls_logistic(X: np.ndarray, y: np.ndarray, w: np.ndarray,
                  labels: tuple[str, ...]) -> tuple[np.ndarray, np.ndarray, int, float, float]:
    """IRLS core shared by the outcome model and sensitivity refits.

    Returns (beta, sandwich covariance, iterations, final step norm,
    deviance). Convergence: max |score|/n < 1e-10 or relative deviance
    change < 1e-12, within 100 iterations. Raises `SeparationError` when
    fitted probabilities pin at the numeric clamps, `RankDeficiencyError`
    for aliased columns, `ConvergenceError` otherwise.
    """
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    # mean-1 weight normalization keeps the convergence thresholds
    # scale-free; beta and the sandwich covariance are invariant to it
    w = w / w.mean()
    n, k = X.shape
    if y.min() == y.max():
        raise EstimationError("outcome vector contains a single class")
    _check_rank(X, labels)

    beta = np.zeros(k)
    eta = X @ beta
    p = expit(eta)
    dev = _deviance(y, p, w)
    step_norm = 0.0
    converged = False
    n_iter = 0
    for n_iter in range(1, MAX_IRLS_ITERATIONS + 1):
        score = X.T @ (w * (y - p))
        if np.max(np.abs(score)) / n < SCORE_TOL:
            converged = True
            n_iter -= 1
            break
        irls_w = w * p * (1.0 - p)
        a = X.T @ (X * irls_w[:, None])
        try:
            delta = linalg.solve(a, score, assume_a="pos")
        except linalg.LinAlgError:
            raise RankDeficiencyError("weighted information matrix is singular")
        # step-halve if the full Newton step overshoots the deviance
        step = 1.0
        for _ in range(12):
            beta_new = beta + step * delta
            eta_new = X @ beta_new
            p_new = expit(eta_new)
            dev_new = _deviance(y, p_new, w)
            if np.isfinite(dev_new) and dev_new <= dev * (1.0 + 1e-12):
                break
            step *= 0.5
        step_norm = float(np.max(np.abs(step * delta)))
        beta, eta, p = beta_new, eta_new, p_new
        if np.max(np.abs(eta)) > _ETA_SEPARATION:
            raise SeparationError(
                "fitted probabilities pinned at numeric limits; the classes "
                "appear separable")
        rel_change = abs(dev - dev_new) / (abs(dev) + 1e-300)
        dev = dev_new
        if rel_change < DEVIANCE_RTOL:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"IRLS did not converge in {MAX_IRLS_ITERATIONS} iterations "
            f"(last step norm {step_norm:.3e}, deviance {dev:.6e})")
    if np.max(np.abs(eta)) > _ETA_SEPARATION:
        raise SeparationError(
            "fitted probabilities pinned at numeric limits; the classes "
            "appear separable")

    cov = _sandwich(X, y, w, p)
    return beta, cov, n_iter, step_norm, dev


def fit_weighted_logistic(design: OutcomeDesign, y: np.ndarray,
                          w: np.ndarray) -> OutcomeFit:
    """Maximize the weighted Bernoulli log-likelihood by IRLS.

    See `irls_logistic` for the convergence contract and failure modes.
    """
    beta, cov, n_iter, step_norm, dev = irls_logistic(design.matrix, y, w,
                                                      design.labels)
    return OutcomeFit(coefficients=beta, covariance=cov, labels=design.labels,
                      t_col=design.t_col, z_col=design.z_col,
                      tz_col=design.tz_col, n=design.n_rows,
                      weighted_n=float(np.sum(w)),
                      n_iterations=n_iter, final_step_norm=step_norm,
                      deviance=dev)


def _sandwich(X: np.ndarray, y: np.ndarray, w: np.ndarray,
              p: np.ndarray) -> np.ndarray:
    a = X.T @ (X * (w * p * (1.0 - p))[:, None])
    u = X * (w * (y - p))[:, None]
    b = u.T @ u
    try:
        a_inv_b = linalg.solve(a, b, assume_a="pos")
        v = linalg.solve(a, a_inv_b.T, assume_a="pos").T
    except linalg.LinAlgError:
        raise RankDeficiencyError("bread matrix is singular in the sandwich")
    return 0.5 * (v + v.T)


def sandwich_covariance(fit: OutcomeFit, design: OutcomeDesign, y: np.ndarray,
                        w: np.ndarray) -> np.ndarray:
    """Design-based covariance A^-1 B A^-1 with weights treated as fixed.

    A = sum_i w_i p_i (1-p_i) x_i x_i', B = sum_i (w_i (y_i - p_i) x_i)
    outer itself; single-PSU, no clustering.
    """
    p = expit(design.matrix @ fit.coefficients)
    return _sandwich(design.matrix, np.asarray(y, dtype=np.float64),
                     np.asarray(w, dtype=np.float64), p)


def _counterfactual_matrix(design: OutcomeDesign, t_val: float,
                           z_val: float | None) -> np.ndarray:
    m = design.matrix.copy()
    m[:, design.t_col] = t_val
    if design.z_col is not None and z_val is not None:
        m[:, design.z_col] = z_val
    if design.tz_col is not None:
        z_now = m[:, design.z_col] if design.z_col is not None else 0.0
        m[:, design.tz_col] = t_val * z_now
    return m


def g_computation(beta: np.ndarray, design: OutcomeDesign, z_val: float | None,
                  w: np.ndarray, rows: np.ndarray | None = None
                  ) -> tuple[float, np.ndarray]:
    """Risk difference and its gradient in beta for one moderator level.

    Sets every row's treatment to 1 then 0 (moderator fixed at z_val when
    the model has one), averages the predicted-probability contrast with
    weights `w`, and returns (risk_difference, d RD / d beta).
    """
    m1 = _counterfactual_matrix(design, 1.0, z_val)
    m0 = _counterfactual_matrix(design, 0.0, z_val)
    if rows is not None:
        m1, m0, w = m1[rows], m0[rows], w[rows]
    p1 = expit(m1 @ beta)
    p0 = expit(m0 @ beta)
    w_total = w.sum()
    rd = float(np.dot(w, p1 - p0) / w_total)
    grad = ((w * p1 * (1.0 - p1)) @ m1 - (w * p0 * (1.0 - p0)) @ m0) / w_total
    return rd, grad


@dataclass(frozen=True)
class MateEstimate:
    """Moderated risk difference for one moderator level."""

    stratum: str
    risk_difference: float
    se: float
    ci_lo: float
    ci_hi: float


def mate_estimates(fit: OutcomeFit, design: OutcomeDesign, w: np.ndarray,
                   moderator: np.ndarray | None = None,
                   averaging: str = "full_sample") -> tuple[MateEstimate, ...]:
    """Risk differences per moderator level with delta-method intervals.

    averaging="full_sample" (default) averages the counterfactual contrast
    over every row with the moderator fixed at each level in turn;
    "within_stratum" restricts to the rows observed at that level (requires
    `moderator`). Models without a moderator column yield a single estimate
    labeled "all".
    """
    if averaging not in ("full_sample", "within_stratum"):
        raise ValueError(f"unknown averaging mode {averaging!r}")
    w = np.asarray(w, dtype=np.float64)

    def one(z_val: float | None, stratum: str, rows) -> MateEstimate:
        rd, grad = g_computation(fit.coefficients, design, z_val, w, rows)
        se = float(np.sqrt(grad @ fit.covariance @ grad))
        return MateEstimate(stratum=stratum, risk_difference=rd, se=se,
                            ci_lo=rd - WALD_Z * se, ci_hi=rd + WALD_Z * se)

    if design.z_col is None:
        return (one(None, "all", None),)
    out = []
    for z in (0, 1):
        rows = None
        if averaging == "within_stratum":
            if moderator is None:
                raise ValueError("within_stratum averaging needs the moderator")
            rows = np.asarray(moderator) == z
        out.append(one(float(z), str(z), rows))
    return tuple(out)


@dataclass(frozen=True)
class ModerationTest:
    """Wald test of the treatment x moderator interaction."""

    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    z_value: float
    p_value: float


def moderation_test(fit: OutcomeFit) -> ModerationTest:
    """Two-sided Wald test of the interaction coefficient (sandwich SE)."""
    if fit.tz_col is None:
        raise ValueError("model has no treatment x moderator interaction")
    est = float(fit.coefficients[fit.tz_col])
    se = float(np.sqrt(fit.covariance[fit.tz_col, fit.tz_col]))
    z = est / se if se > 0 else np.inf * np.sign(est) if est else 0.0
    p = float(2.0 * norm.sf(abs(z)))
    return ModerationTest(estimate=est, se=se, ci_lo=est - WALD_Z * se,
                          ci_hi=est + WALD_Z * se, z_value=float(z), p_value=p)
