"""Built-in synthetic data generator for demos and verification runs.

The generating process mimics a survey-style moderation study: a binary
moderator drawn fairly, four categorical covariates plus one continuous
score (all independent of the moderator so stratum estimands are
unambiguous), treatment assigned by a logistic model whose coefficients
differ by moderator level (stratum-specific confounding), and a binary
outcome from a logistic model in treatment, moderator, their interaction,
and the covariates. Outcome coefficients are calibrated so the true risk
differences are close to 0.05 in stratum 0 and 0.15 in stratum 1;
`true_risk_differences` recovers the exact values by Monte Carlo.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np
from scipy.special import expit

from .boosting import BoostConfig
from .data import Dataset, SchemaConfig, from_arrays
from .sensitivity import SensitivityConfig

DEMO_COLUMNS = {
    "age": ("18-29", "30-44", "45-59", "60+"),
    "educ": ("less_hs", "hs", "some_college", "college"),
    "income": ("low", "mid", "high"),
    "employ": ("full_time", "part_time", "not_working"),
}

_COVARIATE_PROBS = {
    "age": (0.22, 0.28, 0.27, 0.23),
    "educ": (0.12, 0.30, 0.33, 0.25),
    "income": (0.30, 0.45, 0.25),
    "employ": (0.55, 0.18, 0.27),
}

# Treatment-assignment coefficients per moderator level (index 0 / 1).
_T_INTERCEPT = (-1.1, -1.0)
_T_COEF = {
    "age": ((0.0, 0.35, 0.12, -0.12), (0.0, 0.5, 0.18, -0.28)),
    "educ": ((0.0, 0.0, -0.12, -0.35), (0.0, -0.12, -0.28, -0.5)),
    "income": ((0.35, 0.0, -0.18), (0.5, 0.0, -0.28)),
    "employ": ((0.0, 0.18, 0.35), (0.0, 0.35, 0.45)),
}
_T_STRESS = (0.35, 0.45)

# Outcome-model coefficients (shared across moderator levels except for the
# moderator main effect and the treatment x moderator interaction).
_Y_INTERCEPT = -1.4
_Y_TREAT = 0.282
_Y_MOD = -0.30
_Y_INTERACTION = 0.573
_Y_COEF = {
    "age": (0.0, 0.3, 0.4, 0.1),
    "educ": (0.0, 0.0, -0.3, -0.7),
    "income": (0.4, 0.0, -0.3),
    "employ": (0.0, 0.2, 0.4),
}
_Y_STRESS = 0.6


def demo_schema() -> SchemaConfig:
    return SchemaConfig.from_dict({
        "treatment": "exposed",
        "moderator": "group",
        "outcome": "event",
        "survey_weight": None,
        "covariates": [
            {"name": name, "kind": "categorical", "levels": list(levels)}
            for name, levels in DEMO_COLUMNS.items()
        ] + [{"name": "stress", "kind": "continuous"}],
    })


def _draw_covariates(rng: np.random.Generator, n: int):
    codes = {name: rng.choice(len(levels), size=n, p=_COVARIATE_PROBS[name])
             for name, levels in DEMO_COLUMNS.items()}
    stress = rng.standard_normal(n)
    return codes, stress


def _treatment_logit(codes, stress, z):
    eta = np.where(z == 1, _T_INTERCEPT[1], _T_INTERCEPT[0]).astype(np.float64)
    for name, (coef0, coef1) in _T_COEF.items():
        eta += np.where(z == 1, np.asarray(coef1)[codes[name]],
                        np.asarray(coef0)[codes[name]])
    eta += np.where(z == 1, _T_STRESS[1], _T_STRESS[0]) * stress
    return eta

def _outcome_logit(codes, stress, t, z, interaction: float):
    eta = np.full(stress.shape[0], _Y_INTERCEPT, dtype=np.float64)
    eta += _Y_TREAT * t + _Y_MOD * z + interaction * t * z
    for name, coef in _Y_COEF.items():
        eta += np.asarray(coef)[codes[name]]
    eta += _Y_STRESS * stress
    return eta


def generate_demo_dataset(n: int, seed: int, moderation: bool = True) -> Dataset:
    """One draw from the demo process (moderation=False zeroes the
    treatment x moderator interaction for size studies)."""
    rng = np.random.Generator(np.random.PCG64(seed))
    z = (rng.random(n) < 0.5).astype(np.int8)
    codes, stress = _draw_covariates(rng, n)
    t = (rng.random(n) < expit(_treatment_logit(codes, stress, z))).astype(np.int8)
    interaction = _Y_INTERACTION if moderation else 0.0
    y = (rng.random(n) < expit(_outcome_logit(codes, stress, t, z, interaction))
         ).astype(np.int8)
    return from_arrays(demo_schema(), treatment=t, moderator=z, outcome=y,
                       categorical=codes, continuous={"stress": stress})


def true_risk_differences(n_draws: int = 10_000_000, seed: int = 20_240_501,
                          moderation: bool = True) -> tuple[float, float]:
    """Monte-Carlo oracle for the demo process's stratum risk differences.

    Averages expit contrasts over fresh covariate draws (covariates are
    independent of the moderator, so full-population and within-stratum
    estimands coincide).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    interaction = _Y_INTERACTION if moderation else 0.0
    totals = np.zeros(2)
    done = 0
    chunk = 1_000_000
    while done < n_draws:
        m = min(chunk, n_draws - done)
        codes, stress = _draw_covariates(rng, m)
        for z_val in (0, 1):
            z = np.full(m, z_val, dtype=np.int8)
            p1 = expit(_outcome_logit(codes, stress, np.ones(m), z, interaction))
            p0 = expit(_outcome_logit(codes, stress, np.zeros(m), z, interaction))
            totals[z_val] += float(np.sum(p1 - p0))
        done += m
    return float(totals[0] / n_draws), float(totals[1] / n_draws)


def write_demo_csv(path, n: int, seed: int, moderation: bool = True) -> None:
    """Write one demo draw as an analysis-ready CSV."""
    ds = generate_demo_dataset(n, seed, moderation)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    schema = ds.schema
    header = [schema.treatment, schema.moderator, schema.outcome]
    header += list(DEMO_COLUMNS) + ["stress"]
    writer.writerow(header)
    for i in range(ds.n_rows):
        row = [int(ds.treatment[i]), int(ds.moderator[i]), int(ds.outcome[i])]
        for name, levels in DEMO_COLUMNS.items():
            row.append(levels[ds.categorical[name][i]])
        row.append(str(float(ds.continuous["stress"][i])))
        writer.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def demo_boost_config(seed: int = 0) -> BoostConfig:
    """Boosting settings sized for the n=4,000 demo (seconds per stratum)."""
    return BoostConfig(n_trees=600, interaction_depth=2, shrinkage=0.10,
                       bag_fraction=1.0, min_node_weight=10.0,
                       stop_method="es_max", eval_stride=10, seed=seed)


def demo_sensitivity_config(seed: int = 0) -> SensitivityConfig:
    """Coarse grid that keeps the full demo run under a few minutes."""
    return SensitivityConfig(
        es_grid=tuple(round(-0.6 + 0.1 * i, 10) for i in range(13)),
        rho_grid=(0.0, 0.1, 0.2, 0.3),
        n_reps=20,
        p_contours=(0.05,),
        seed=seed,
    )


def demo_run_config(data_path, out_dir, seed: int = 17) -> dict:
    """JSON-ready run configuration for the generated demo data."""
    return {
        "input": str(data_path),
        "schema": demo_schema().to_dict(),
        "boost": demo_boost_config(seed).to_dict(),
        "sensitivity": demo_sensitivity_config(seed).to_dict(),
        "ps_mode": "stratified",
        "mate_averaging": "full_sample",
        "strict_overlap": False,
        "strict_balance": False,
        "out_dir": str(out_dir),
        "seed": seed,
    }
