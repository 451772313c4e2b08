"""Gradient-boosted propensity models with balance-optimized stopping.

The treatment probability is fit by functional gradient descent on the
weighted Bernoulli deviance: shallow regression trees are grown on the
gradient residuals (t - p) with weighted variance-reduction splits, and
each leaf takes a damped Newton step. Rather than stopping on deviance,
the boosting iteration is chosen to minimize a covariate-balance criterion
(max weighted KS or max |weighted SMD| over every covariate level and
continuous column) evaluated on the ATE weights the iteration implies, on
a stride grid with local refinement.

Determinism: survey weights are normalized to mean 1 internally, so the
learned trees, selected iteration, and balance criteria are invariant to
rescaling all weights by a constant. With bag_fraction=1.0 no random state
is consumed at all. Split ties break toward the lowest column index, then
the lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np
from scipy.special import expit, logit

from . import balance
from .data import Dataset, DesignMatrix, encode, stratum_index
from .errors import ConfigError, EstimationError

# Propensities are clamped into [PROPENSITY_CLAMP, 1-PROPENSITY_CLAMP]
# before inversion so ATE weights stay finite.
PROPENSITY_CLAMP = 1e-6

# predict_proba keeps probabilities strictly inside (0, 1) even when the
# boosted score saturates expit in double precision.
_PROBA_EPS = 1e-12

STOP_METHODS = ("ks_max", "es_max")


@dataclass(frozen=True)
class BoostConfig:
    """Hyperparameters for one boosted propensity fit."""

    n_trees: int = 10_000
    interaction_depth: int = 2
    shrinkage: float = 0.01
    bag_fraction: float = 1.0
    min_node_weight: float = 10.0
    stop_method: str = "ks_max"
    eval_stride: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ConfigError("n_trees must be a positive integer")
        if self.interaction_depth < 1:
            raise ConfigError("interaction_depth must be a positive integer")
        if not 0.0 < self.shrinkage <= 1.0:
            raise ConfigError("shrinkage must be in (0, 1]")
        if not 0.0 < self.bag_fraction <= 1.0:
            raise ConfigError("bag_fraction must be in (0, 1]")
        if self.min_node_weight < 0:
            raise ConfigError("min_node_weight must be nonnegative")
        if self.stop_method not in STOP_METHODS:
            raise ConfigError(f"stop_method must be one of {STOP_METHODS}")
        if self.eval_stride < 1:
            raise ConfigError("eval_stride must be a positive integer")

    @classmethod
    def from_dict(cls, d: dict) -> "BoostConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown boost config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "n_trees": self.n_trees,
            "interaction_depth": self.interaction_depth,
            "shrinkage": self.shrinkage,
            "bag_fraction": self.bag_fraction,
            "min_node_weight": self.min_node_weight,
            "stop_method": self.stop_method,
            "eval_stride": self.eval_stride,
            "seed": self.seed,
        }


class _Tree:
    """One regression tree stored as flat node arrays.

    feature[i] == -1 marks a leaf; otherwise rows with
    x[feature[i]] <= threshold[i] go to left[i], the rest to right[i].
    """

    __slots__ = ("feature", "threshold", "left", "right", "value")

    def __init__(self, feature, threshold, left, right, value):
        self.feature = np.asarray(feature, dtype=np.int32)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int32)
        self.right = np.asarray(right, dtype=np.int32)
        self.value = np.asarray(value, dtype=np.float64)

    @property
    def depth(self) -> int:
        def rec(nid: int) -> int:
            if self.feature[nid] < 0:
                return 0
            return 1 + max(rec(self.left[nid]), rec(self.right[nid]))
        return rec(0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf value for every row of X."""
        out = np.empty(X.shape[0], dtype=np.float64)

        def rec(nid: int, idx: np.ndarray) -> None:
            f = self.feature[nid]
            if f < 0:
                out[idx] = self.value[nid]
                return
            go_left = X[idx, f] <= self.threshold[nid]
            rec(self.left[nid], idx[go_left])
            rec(self.right[nid], idx[~go_left])

        rec(0, np.arange(X.shape[0]))
        return out


class _TreeGrower:
    """Vectorized depth-limited CART growth on gradient residuals.

    The sort order of every feature is computed once per fit; a node's
    split statistics are obtained by zeroing the weights of rows outside
    the node, which leaves the cumulative sums (and therefore every gain)
    exact while keeping all features in one (n, f) matrix pass. Split ties
    break toward the lowest feature index, then the lowest threshold
    (column-major argmax). Leaf values are damped-Newton steps
    sum(g)/sum(h) over the node's in-bag rows.
    """

    def __init__(self, X: np.ndarray, min_node_weight: float, max_depth: int):
        self.X = X
        self.min_w = min_node_weight
        self.max_depth = max_depth
        self.n, self.n_feat = X.shape
        self.order = np.argsort(X, axis=0, kind="stable")
        self.x_sorted = np.take_along_axis(X, self.order, axis=0)
        self.distinct = self.x_sorted[:-1] < self.x_sorted[1:]
        self._root_cw: np.ndarray | None = None

    def set_weights(self, w: np.ndarray) -> None:
        """Cache the root weight cumsums (iteration-invariant, full bag)."""
        self._root_cw = np.cumsum(w[self.order], axis=0)

    def _best_split(self, g, w, mask):
        if mask is None and self._root_cw is not None:
            cg = np.cumsum(g[self.order], axis=0)
            cw = self._root_cw
        else:
            gz = np.where(mask, g, 0.0)
            wz = np.where(mask, w, 0.0)
            cg = np.cumsum(gz[self.order], axis=0)
            cw = np.cumsum(wz[self.order], axis=0)
        lw = cw[:-1]
        rw = cw[-1] - lw
        valid = self.distinct & (lw > 0.0) & (rw > 0.0)
        if self.min_w > 0.0:
            valid &= (lw >= self.min_w) & (rw >= self.min_w)
        lg = cg[:-1]
        rg = cg[-1] - lg
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = lg * lg / lw + rg * rg / rw
        flat = np.where(valid, gain, -np.inf).ravel(order="F")
        k = int(np.argmax(flat))
        if flat[k] == -np.inf:
            return None
        j, pos = divmod(k, self.n - 1)
        return j, 0.5 * (self.x_sorted[pos, j] + self.x_sorted[pos + 1, j])

    def grow(self, g, h, w, in_bag) -> tuple[_Tree, np.ndarray]:
        """Returns the tree and its prediction on the training rows."""
        feature = [-1]
        threshold = [0.0]
        left = [-1]
        right = [-1]
        value = [0.0]
        train_pred = np.zeros(self.n)
        stack = [(0, in_bag, 0)]
        while stack:
            nid, mask, depth = stack.pop()
            if depth < self.max_depth:
                best = self._best_split(g, w, mask)
                if best is not None:
                    j, thr = best
                    feature[nid] = j
                    threshold[nid] = thr
                    go_left = self.X[:, j] <= thr
                    left_mask = go_left if mask is None else mask & go_left
                    right_mask = ~go_left if mask is None else mask & ~go_left
                    for _ in range(2):
                        feature.append(-1)
                        threshold.append(0.0)
                        left.append(-1)
                        right.append(-1)
                        value.append(0.0)
                    left[nid] = len(feature) - 2
                    right[nid] = len(feature) - 1
                    stack.append((right[nid], right_mask, depth + 1))
                    stack.append((left[nid], left_mask, depth + 1))
                    continue
            # leaf: Newton step, guarded against a vanishing Hessian
            if mask is None:
                g_sum = float(g.sum())
                h_sum = float(h.sum())
                leaf_rows = slice(None)
            else:
                g_sum = float(g[mask].sum())
                h_sum = float(h[mask].sum())
                leaf_rows = mask
            value[nid] = g_sum / h_sum if h_sum > 1e-12 else 0.0
            train_pred[leaf_rows] = value[nid]
        return _Tree(feature, threshold, left, right, value), train_pred


@dataclass(frozen=True)
class BoostedModel:
    """An ordered sequence of shrunken regression trees plus the baseline
    score f0 (weighted log-odds of treatment)."""

    f0: float
    shrinkage: float
    trees: tuple[_Tree, ...]
    n_features: int
    feature_labels: tuple[str, ...]

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict_score(self, X: np.ndarray, iteration: int | None = None) -> np.ndarray:
        """Boosted score F at `iteration` (trees 1..iteration; 0 = f0 only)."""
        m = self.n_trees if iteration is None else iteration
        if not 0 <= m <= self.n_trees:
            raise ValueError(f"iteration {m} outside trained range 0..{self.n_trees}")
        F = np.full(X.shape[0], self.f0, dtype=np.float64)
        for tree in self.trees[:m]:
            F += self.shrinkage * tree.apply(X)
        return F

    def staged_scores(self, X: np.ndarray) -> Iterator[tuple[int, np.ndarray]]:
        """Yield (iteration, score) incrementally from iteration 0 upward."""
        F = np.full(X.shape[0], self.f0, dtype=np.float64)
        yield 0, F
        for m, tree in enumerate(self.trees, start=1):
            F = F + self.shrinkage * tree.apply(X)
            yield m, F

    def predict_proba(self, X: np.ndarray, iteration: int | None = None) -> np.ndarray:
        """Treatment probabilities, strictly inside (0, 1)."""
        return np.clip(expit(self.predict_score(X, iteration)),
                       _PROBA_EPS, 1.0 - _PROBA_EPS)


def fit_boosted_propensity(design: DesignMatrix, treatment: np.ndarray,
                           sample_weights: np.ndarray,
                           cfg: BoostConfig) -> BoostedModel:
    """Boost regression trees against the weighted Bernoulli deviance.

    Sample weights are normalized to mean 1 before fitting, so
    min_node_weight counts average-weight observations and the fit is
    invariant to a common rescaling of the weights. Deterministic given
    cfg.seed; with bag_fraction=1.0, deterministic regardless of seed.
    """
    X = design.matrix
    t = np.asarray(treatment, dtype=np.float64)
    if X.shape[0] != t.shape[0] or X.shape[0] != len(sample_weights):
        raise ValueError("design, treatment, and weights must align")
    if t.min() == t.max():
        raise EstimationError("treatment vector contains a single class")
    w = np.asarray(sample_weights, dtype=np.float64)
    w = w / w.mean()

    p_bar = float(np.dot(w, t) / w.sum())
    f0 = float(logit(p_bar))
    grower = _TreeGrower(X, cfg.min_node_weight, cfg.interaction_depth)

    rng = None
    n_bag = X.shape[0]
    if cfg.bag_fraction < 1.0:
        rng = np.random.Generator(np.random.PCG64(cfg.seed))
        n_bag = max(1, int(np.ceil(cfg.bag_fraction * X.shape[0])))
    else:
        grower.set_weights(w)

    F = np.full(X.shape[0], f0, dtype=np.float64)
    trees: list[_Tree] = []
    for _ in range(cfg.n_trees):
        p = expit(F)
        g = w * (t - p)
        h = w * p * (1.0 - p)
        if rng is None:
            tree, pred = grower.grow(g, h, w, None)
        else:
            in_bag = np.zeros(X.shape[0], dtype=bool)
            in_bag[rng.choice(X.shape[0], size=n_bag, replace=False)] = True
            tree, _ = grower.grow(g, h, w, in_bag)
            pred = tree.apply(X)
        F += cfg.shrinkage * pred
        trees.append(tree)
    return BoostedModel(f0=f0, shrinkage=cfg.shrinkage, trees=tuple(trees),
                        n_features=X.shape[1], feature_labels=design.labels)


def ate_weights(propensities: np.ndarray, treatment: np.ndarray) -> np.ndarray:
    """Inverse-probability ATE weights: 1/p for treated, 1/(1-p) for control.

    Propensities are clamped into [1e-6, 1-1e-6] before inversion; every
    weight is finite and >= 1.
    """
    p = np.clip(np.asarray(propensities, dtype=np.float64),
                PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)
    t = np.asarray(treatment, dtype=np.float64)
    return t / p + (1.0 - t) / (1.0 - p)


def _criterion_matrix(design: DesignMatrix) -> np.ndarray:
    """Columns the balance criterion ranges over.

    The design drops one reference indicator per categorical covariate, but
    balance is assessed on every level, so each covariate's reference
    indicator is reconstructed as one minus the sum of its sibling columns
    (exact, since the siblings are disjoint 0/1 vectors).
    """
    cols: list[np.ndarray] = []
    seen: set[str] = set()
    for j, (cov, level) in enumerate(design.columns):
        if level is None:
            cols.append(design.matrix[:, j])
            continue
        if cov not in seen:
            seen.add(cov)
            siblings = [k for k, (c, lv) in enumerate(design.columns)
                        if c == cov and lv is not None]
            cols.append(1.0 - design.matrix[:, siblings].sum(axis=1))
        cols.append(design.matrix[:, j])
    return np.column_stack(cols) if cols else np.empty((design.n_rows, 0))


def _criterion_stats(columns: np.ndarray, treatment, composite,
                     survey) -> tuple[float, float]:
    """(ks_max, es_max) over criterion columns under composite weights.

    SMD denominators come from the survey-weighted full sample, matching
    the balance module's convention.
    """
    ks_max = 0.0
    es_max = 0.0
    for j in range(columns.shape[1]):
        col = columns[:, j]
        ks = balance.weighted_ks(col, treatment, composite)
        es = abs(balance.weighted_smd(col, treatment, composite,
                                      denom_weights=survey))
        ks_max = max(ks_max, ks)
        es_max = max(es_max, es)
    return ks_max, es_max


class _CriterionEvaluator:
    """Matrix-form ks_max/es_max over fixed columns for many weight vectors.

    Sort orders, tied-run boundaries, treated masks, and the survey-weighted
    SMD denominators depend only on the columns, so they are precomputed;
    each call costs one gather and two cumulative sums. Values agree with
    the per-column balance statistics to float round-off.
    """

    def __init__(self, columns: np.ndarray, treatment: np.ndarray,
                 survey: np.ndarray):
        self.columns = columns
        self.order = np.argsort(columns, axis=0, kind="stable")
        xs = np.take_along_axis(columns, self.order, axis=0)
        last = np.empty(xs.shape, dtype=bool)
        last[:-1] = xs[1:] != xs[:-1]
        last[-1] = True
        self.last = last
        self.treated = np.asarray(treatment) == 1
        self.treated_sorted = self.treated[self.order]
        means = survey @ columns / survey.sum()
        self.sd_pool = np.sqrt(survey @ (columns - means) ** 2 / survey.sum())

    def stats(self, composite: np.ndarray) -> tuple[float, float]:
        ws = composite[self.order]
        cum_t = np.cumsum(np.where(self.treated_sorted, ws, 0.0), axis=0)
        cum_c = np.cumsum(np.where(self.treated_sorted, 0.0, ws), axis=0)
        diff = np.abs(cum_t / cum_t[-1] - cum_c / cum_c[-1])
        ks_max = float(np.where(self.last, diff, 0.0).max())

        wt = np.where(self.treated, composite, 0.0)
        wc = composite - wt
        mean_t = wt @ self.columns / wt.sum()
        mean_c = wc @ self.columns / wc.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            es = np.abs(mean_t - mean_c) / self.sd_pool
        es_max = float(np.where(self.sd_pool > 0.0, es, 0.0).max())
        return ks_max, es_max


def evaluate_criterion(model: BoostedModel, iteration: int,
                       design: DesignMatrix, treatment: np.ndarray,
                       sample_weights: np.ndarray) -> tuple[float, float]:
    """Balance criterion implied by the model at one boosting iteration.

    Computes ATE weights from the iteration's propensities, multiplies by
    the survey weights, and returns the max weighted KS and max |weighted
    SMD| over every covariate level (reference indicators included) and
    continuous column.
    """
    if not 0 <= iteration <= model.n_trees:
        raise ValueError("iteration exceeds trained iterations")
    p = model.predict_proba(design.matrix, iteration)
    composite = ate_weights(p, treatment) * sample_weights
    return _criterion_stats(_criterion_matrix(design), treatment, composite,
                            sample_weights)


def _stride_search(batch_eval, n_trees: int, stride: int,
                   crit_col: int) -> tuple[int, dict[int, tuple[float, float]]]:
    """Coarse-grid-plus-refinement minimum search over iterations.

    batch_eval maps a sorted list of iterations to their (ks_max, es_max)
    pairs. Evaluates every `stride` iterations plus both endpoints, then
    every iteration within one stride of the coarse minimum; returns the
    argmin over all evaluated points (ties -> smallest iteration) and the
    full evaluation record.
    """
    coarse = sorted(set(range(0, n_trees + 1, stride)) | {0, n_trees})
    evaluated = dict(batch_eval(coarse))

    def best_of(iters) -> int:
        return min(iters, key=lambda m: (evaluated[m][crit_col], m))

    center = best_of(coarse)
    lo = max(0, center - stride + 1)
    hi = min(n_trees, center + stride - 1)
    refine = [m for m in range(lo, hi + 1) if m not in evaluated]
    if refine:
        evaluated.update(batch_eval(refine))
    return best_of(sorted(evaluated)), evaluated


def select_iteration(model: BoostedModel, cfg: BoostConfig,
                     design: DesignMatrix, treatment: np.ndarray,
                     sample_weights: np.ndarray) -> tuple[int, np.ndarray]:
    """Pick the boosting iteration minimizing the configured criterion.

    Evaluates every cfg.eval_stride iterations plus both endpoints, then
    every iteration within one stride of the coarse minimum, and returns
    the global minimum over evaluated points (ties -> smallest iteration).
    Returns (selected_iteration, trace) where trace rows are
    (iteration, ks_max, es_max) for every evaluated point.
    """
    t = np.asarray(treatment)
    s = np.asarray(sample_weights, dtype=np.float64)
    X = design.matrix
    evaluator = _CriterionEvaluator(_criterion_matrix(design), t, s)

    def batch_eval(iters):
        targets = set(iters)
        out = []
        for m, F in model.staged_scores(X):
            if m in targets:
                p = np.clip(expit(F), _PROBA_EPS, 1.0 - _PROBA_EPS)
                out.append((m, evaluator.stats(ate_weights(p, t) * s)))
            if m >= max(targets):
                break
        return out

    crit_col = 0 if cfg.stop_method == "ks_max" else 1
    selected, evaluated = _stride_search(batch_eval, model.n_trees,
                                         cfg.eval_stride, crit_col)
    trace = np.array([(m, evaluated[m][0], evaluated[m][1])
                      for m in sorted(evaluated)], dtype=np.float64)
    return selected, trace


def effective_sample_size(weights: np.ndarray) -> float:
    """ESS = (sum w)^2 / sum(w^2); the precision cost of variable weights."""
    w = np.asarray(weights, dtype=np.float64)
    return float(w.sum() ** 2 / np.dot(w, w))


@dataclass(frozen=True)
class PropensityFit:
    """Fitted propensities and weights for one stratum (or the pooled fit).

    `row_index` maps the fit's rows back to positions in the analysis
    Dataset; propensity/weight vectors align with it. ps_weights are ATE
    weights from the selected iteration; composite weights multiply in the
    survey weights.
    """

    stratum: str
    model: BoostedModel
    selected_iteration: int
    criterion_trace: np.ndarray
    propensities: np.ndarray
    ps_weights: np.ndarray
    composite_weights: np.ndarray
    row_index: np.ndarray
    ess_treated: float
    ess_control: float

    def __post_init__(self):
        for arr in (self.criterion_trace, self.propensities, self.ps_weights,
                    self.composite_weights, self.row_index):
            arr.setflags(write=False)


def _check_cells(ds: Dataset, stratum: str) -> None:
    n_treated = int((ds.treatment == 1).sum())
    n_control = int((ds.treatment == 0).sum())
    if n_treated < 2 or n_control < 2:
        raise EstimationError(
            f"stratum {stratum}: need at least 2 rows per treatment cell, "
            f"got treated={n_treated}, control={n_control}")


def _finish_fit(ds: Dataset, design: DesignMatrix, cfg: BoostConfig,
                stratum: str, row_index: np.ndarray) -> PropensityFit:
    model = fit_boosted_propensity(design, ds.treatment, ds.survey_weights, cfg)
    selected, trace = select_iteration(model, cfg, design, ds.treatment,
                                       ds.survey_weights)
    p = model.predict_proba(design.matrix, selected)
    ps_w = ate_weights(p, ds.treatment)
    composite = ps_w * ds.survey_weights
    treated = ds.treatment == 1
    return PropensityFit(
        stratum=stratum,
        model=model,
        selected_iteration=selected,
        criterion_trace=trace,
        propensities=p,
        ps_weights=ps_w,
        composite_weights=composite,
        row_index=row_index,
        ess_treated=effective_sample_size(composite[treated]),
        ess_control=effective_sample_size(composite[~treated]),
    )


def fit_stratified(ds: Dataset, cfg: BoostConfig) -> list[PropensityFit]:
    """One balance-optimized fit per observed moderator level.

    Per-stratum seeds are derived as cfg.seed XOR the moderator level, so
    results do not depend on fitting order.
    """
    fits = []
    for z in sorted(int(v) for v in np.unique(ds.moderator)):
        idx = stratum_index(ds, z)
        sub = ds.take(idx)
        _check_cells(sub, str(z))
        design = encode(sub, include_moderator=False)
        cfg_z = replace(cfg, seed=cfg.seed ^ z)
        fits.append(_finish_fit(sub, design, cfg_z, str(z), idx))
    return fits


def fit_pooled(ds: Dataset, cfg: BoostConfig) -> PropensityFit:
    """Single fit over all rows with the moderator as a design column."""
    for z in sorted(int(v) for v in np.unique(ds.moderator)):
        _check_cells(ds.take(stratum_index(ds, z)), str(z))
    design = encode(ds, include_moderator=True)
    return _finish_fit(ds, design, cfg, "pooled",
                       np.arange(ds.n_rows, dtype=np.int64))
