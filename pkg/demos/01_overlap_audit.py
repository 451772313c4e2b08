"""Step 1 walkthrough: auditing covariate overlap before any weighting.

Positivity asks that every kind of person in the data had a real chance of
landing in either exposure arm, within each moderator level. There is no
formal test, but two symptoms are checkable: empty cells of a categorical
covariate within a (treatment x moderator) block, and disjoint observed
ranges of a continuous covariate. This script builds a healthy synthetic
sample, then deliberately breaks it both ways.
"""

import numpy as np

from modwt import from_arrays, overlap_report
from modwt.data import SchemaConfig
from modwt.demo import generate_demo_dataset

# A healthy draw from the built-in demo process: no overlap problems.
ds = generate_demo_dataset(n=3000, seed=7)
report = overlap_report(ds)
print("healthy sample:")
print(f"  empty cells: {len(report.empty_cells)}")
print(f"  range violations: {len(report.range_violations)}")
print(f"  audit ok: {report.ok}")

# Now break positivity on purpose. Schema: one 3-level covariate plus one
# continuous covariate.
schema = SchemaConfig.from_dict({
    "treatment": "t", "moderator": "z", "outcome": "y",
    "survey_weight": None,
    "covariates": [
        {"name": "site", "kind": "categorical", "levels": ["a", "b", "c"]},
        {"name": "score", "kind": "continuous"},
    ],
})

rng = np.random.default_rng(21)
n = 400
t = rng.integers(0, 2, n)
z = rng.integers(0, 2, n)
site = rng.integers(0, 3, n)
# nobody from site "c" is ever treated -> empty (c, t=1, z) cells
site[t == 1] = rng.integers(0, 2, (t == 1).sum())
# treated scores sit entirely above control scores within z=1
score = rng.normal(size=n)
score[(t == 1) & (z == 1)] = rng.uniform(5.0, 6.0, ((t == 1) & (z == 1)).sum())
score[(t == 0) & (z == 1)] = rng.uniform(0.0, 1.0, ((t == 0) & (z == 1)).sum())

broken = from_arrays(schema, treatment=t, moderator=z,
                     outcome=rng.integers(0, 2, n),
                     categorical={"site": site}, continuous={"score": score})
report = overlap_report(broken)

print("\nbroken sample:")
for cov, level, t_val, z_val in report.empty_cells:
    print(f"  empty cell: {cov}={level} has no rows with T={t_val}, Z={z_val}")
for cov, t_val, z_val, direction in report.range_violations:
    print(f"  range violation: {cov} treated support lies {direction} "
          f"control support within Z={z_val}")
print("\nfull text report:\n")
print(report.to_text())
