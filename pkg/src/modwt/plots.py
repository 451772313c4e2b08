"""SVG plot emission: balance love plots and sensitivity contour plots.

Output is deterministic: the SVG hash salt is pinned and savefig metadata
drops the creation date, so identical inputs produce identical bytes for a
given matplotlib version.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .balance import BALANCE_THRESHOLD, BalanceTable  # noqa: E402
from .sensitivity import SensitivityGrid  # noqa: E402

plt.rcParams["svg.hashsalt"] = "modwt"

_SAVEFIG_KW = {"format": "svg", "metadata": {"Date": None}}


def _row_label(row) -> str:
    if row.level == "-":
        return row.covariate
    return f"{row.covariate}={row.level}"


def love_plot(table: BalanceTable, stratum: str, path) -> Path:
    """Paired |SMD| bars before/after weighting with the 0.10 reference."""
    pre = table.subset(stratum=stratum, phase="pre")
    post = table.subset(stratum=stratum, phase="post")
    labels = [_row_label(r) for r in pre]
    pre_vals = [abs(r.smd) for r in pre]
    post_by_key = {(r.covariate, r.level): abs(r.smd) for r in post}
    post_vals = [post_by_key[(r.covariate, r.level)] for r in pre]

    y = np.arange(len(labels), dtype=np.float64)
    height = 0.38
    fig, ax = plt.subplots(figsize=(7.0, max(3.0, 0.32 * len(labels) + 1.2)))
    ax.barh(y + height / 2, pre_vals, height=height, color="#c44e52",
            label="before weighting")
    ax.barh(y - height / 2, post_vals, height=height, color="#4c72b0",
            label="after weighting")
    ax.axvline(BALANCE_THRESHOLD, color="black", linestyle="--", linewidth=1,
               label=f"threshold {BALANCE_THRESHOLD:.2f}")
    ax.set_yticks(y)
    ax.set_yticklabels(labels, fontsize=8)
    ax.invert_yaxis()
    ax.set_xlabel("|standardized mean difference|")
    ax.set_title(f"Covariate balance, stratum {stratum}")
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path


def sensitivity_plot(grid: SensitivityGrid, path,
                     p_contours=(0.05,)) -> Path:
    """Solid estimate contours, dashed p-value contours, benchmark dots."""
    es = np.asarray(grid.es_grid)
    rho = np.asarray(grid.rho_grid)
    xx, yy = np.meshgrid(es, rho, indexing="ij")
    est = np.ma.masked_invalid(grid.mean_estimate)
    pval = np.ma.masked_invalid(grid.mean_p)

    fig, ax = plt.subplots(figsize=(7.0, 5.0))
    if est.count() > 1 and np.ptp(est.compressed()) > 0:
        cs = ax.contour(xx, yy, est, levels=8, colors="#333333",
                        linestyles="solid", linewidths=1.0)
        ax.clabel(cs, fmt="%.3f", fontsize=7)
    levels = sorted(p_contours)
    if pval.count() > 1 and np.ptp(pval.compressed()) > 0:
        cs_p = ax.contour(xx, yy, pval, levels=levels, colors="#c44e52",
                          linestyles="dashed", linewidths=1.4)
        ax.clabel(cs_p, fmt="p=%.2f", fontsize=8)
    if grid.benchmarks:
        ax.scatter([b.es for b in grid.benchmarks],
                   [b.rho for b in grid.benchmarks],
                   s=18, color="black", zorder=5, label="observed covariates")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_xlabel("association with treatment (SMD of omitted variable)")
    ax.set_ylabel("correlation with outcome")
    ax.set_title(
        f"Omitted-variable sensitivity, stratum {grid.stratum} "
        f"(baseline {grid.baseline_estimate:.3f}, p={grid.baseline_p:.3g})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, **_SAVEFIG_KW)
    plt.close(fig)
    return path
