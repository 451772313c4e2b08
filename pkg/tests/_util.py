"""Shared builders for test datasets."""

import numpy as np

from modwt.data import SchemaConfig, from_arrays


def two_cov_schema(survey_weight=None):
    return SchemaConfig.from_dict({
        "treatment": "t",
        "moderator": "z",
        "outcome": "y",
        "survey_weight": survey_weight,
        "covariates": [
            {"name": "grp", "kind": "categorical", "levels": ["a", "b", "c"]},
            {"name": "x", "kind": "continuous"},
        ],
    })


def random_dataset(rng, n=200, weighted=True, confounded=True):
    """Small generic dataset with a 3-level covariate and a continuous one."""
    grp = rng.integers(0, 3, size=n)
    x = rng.normal(size=n)
    z = rng.integers(0, 2, size=n)
    logit_t = -0.3 + (0.7 * (grp == 0) + 0.5 * x) * (1.0 if confounded else 0.0)
    t = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit_t))).astype(int)
    logit_y = -0.5 + 0.6 * t + 0.4 * (grp == 0) + 0.3 * x - 0.2 * z
    y = (rng.random(n) < 1.0 / (1.0 + np.exp(-logit_y))).astype(int)
    w = rng.uniform(0.5, 2.5, size=n) if weighted else np.ones(n)
    return from_arrays(two_cov_schema("w" if weighted else None),
                       treatment=t, moderator=z, outcome=y, survey_weights=w,
                       categorical={"grp": grp}, continuous={"x": x})


def csv_bytes(header, rows):
    lines = [",".join(header)]
    lines += [",".join(str(v) for v in row) for row in rows]
    return ("\r\n".join(lines) + "\r\n").encode("utf-8")
