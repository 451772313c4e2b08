"""Propensity-score-weighted moderation analysis.

Balance-optimized boosted propensity weights within moderator strata,
covariate-balance diagnostics, doubly robust weighted-logistic estimation
of moderated treatment effects with design-based variance, and an
omitted-variable sensitivity simulation.
"""

__version__ = "0.1.0"

from .balance import (BALANCE_THRESHOLD, BalanceRow, BalanceTable,
                      balance_table, weighted_ks, weighted_mean, weighted_smd,
                      weighted_var)
from .boosting import (BoostConfig, BoostedModel, PropensityFit, ate_weights,
                       effective_sample_size, evaluate_criterion,
                       fit_boosted_propensity, fit_pooled, fit_stratified,
                       select_iteration)
from .data import (CovariateSpec, Dataset, DesignMatrix, SchemaConfig, encode,
                   from_arrays, load_dataset, stratify)
from .errors import (ConfigError, ConvergenceError, DegenerateBalanceError,
                     EmptyStratumError, EstimationError, IngestionError,
                     ModwtError, RankDeficiencyError, SeparationError,
                     StrictGateError)
from .outcome import (MateEstimate, ModerationTest, OutcomeDesign, OutcomeFit,
                      build_outcome_design, fit_weighted_logistic,
                      g_computation, mate_estimates, moderation_test,
                      sandwich_covariance)
from .overlap import ContingencyTable, OverlapReport, crosstab, overlap_report
from .pipeline import ReportBundle, RunConfig, emit_plots, run_pipeline
from .sensitivity import (BenchmarkPoint, SensitivityConfig, SensitivityGrid,
                          adjusted_effect, benchmark_points, ov_grid,
                          simulate_omitted_variable)

__all__ = [
    "BALANCE_THRESHOLD", "BalanceRow", "BalanceTable", "BenchmarkPoint",
    "BoostConfig", "BoostedModel", "ConfigError", "ConvergenceError",
    "CovariateSpec", "Dataset", "DegenerateBalanceError", "DesignMatrix",
    "EmptyStratumError", "EstimationError", "IngestionError", "MateEstimate",
    "ModerationTest", "ModwtError", "OutcomeDesign", "OutcomeFit",
    "OverlapReport", "ContingencyTable", "PropensityFit",
    "RankDeficiencyError", "ReportBundle", "RunConfig", "SchemaConfig",
    "SensitivityConfig", "SensitivityGrid", "SeparationError",
    "StrictGateError", "adjusted_effect", "ate_weights", "balance_table",
    "benchmark_points", "build_outcome_design", "crosstab",
    "effective_sample_size", "emit_plots", "encode", "evaluate_criterion",
    "fit_boosted_propensity", "fit_pooled", "fit_stratified",
    "fit_weighted_logistic", "from_arrays", "g_computation", "load_dataset",
    "mate_estimates", "moderation_test", "ov_grid", "overlap_report",
    "run_pipeline", "sandwich_covariance", "select_iteration",
    "simulate_omitted_variable", "stratify", "weighted_ks", "weighted_mean",
    "weighted_smd", "weighted_var",
]
