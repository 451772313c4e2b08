"""Exception types shared across the package.

The CLI maps these onto exit codes: input/config problems exit 1,
statistical failures (separation, non-convergence, degenerate balance)
exit 2, and strict-gate aborts exit 3.
"""


class ModwtError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ModwtError):
    """Invalid run or schema configuration."""


class IngestionError(ModwtError):
    """CSV ingestion failed (bad column, bad value, bad weight)."""


class EmptyStratumError(ModwtError):
    """A moderator stratum contains no rows."""


class EstimationError(ModwtError):
    """A model fit failed for statistical reasons."""

    exit_code = 2


class SeparationError(EstimationError):
    """Logistic fit diverged: a linear combination separates the classes."""


class ConvergenceError(EstimationError):
    """Iterative fit did not converge within the iteration budget."""


class RankDeficiencyError(EstimationError):
    """Design matrix is rank deficient; message names the aliased columns."""


class DegenerateBalanceError(EstimationError):
    """A balance statistic is undefined (zero spread with unequal means)."""


class StrictGateError(ModwtError):
    """An overlap or balance gate fired while running in strict mode."""

    exit_code = 3
