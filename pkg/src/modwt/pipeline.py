"""End-to-end batch pipeline: load, audit overlap, fit weights, assess
balance, estimate moderated effects, run the sensitivity grid, and emit
every artifact under one output directory.

Reruns with an identical configuration and input bytes reproduce the
analysis outputs byte for byte (the manifest additionally records wall
times, so it is compared by its file-digest table rather than whole-file).
On failure a FAILED marker naming the step is left in the output
directory.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import __version__
from .balance import BalanceTable, balance_table
from .boosting import BoostConfig, PropensityFit, fit_pooled, fit_stratified
from .data import Dataset, SchemaConfig, load_dataset
from .errors import ConfigError, StrictGateError
from .outcome import (MateEstimate, ModerationTest, OutcomeFit, WALD_Z,
                      build_outcome_design, fit_weighted_logistic,
                      mate_estimates, moderation_test)
from .overlap import OverlapReport, overlap_report
from .sensitivity import SensitivityConfig, SensitivityGrid, ov_grid

PS_MODES = ("stratified", "pooled")
MATE_AVERAGING = ("full_sample", "within_stratum")


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one pipeline run.

    `seed` is the master seed: the boost and sensitivity sections inherit
    it unless their JSON explicitly carries their own. `sensitivity=None`
    disables the sensitivity step. `max_parallel` is accepted for interface
    stability; execution is sequential and results never depend on it.
    """

    input: Path
    schema: SchemaConfig
    out_dir: Path
    seed: int
    boost: BoostConfig
    sensitivity: SensitivityConfig | None
    ps_mode: str = "stratified"
    mate_averaging: str = "full_sample"
    strict_overlap: bool = False
    strict_balance: bool = False
    max_parallel: int = 1

    def __post_init__(self):
        if self.ps_mode not in PS_MODES:
            raise ConfigError(f"ps_mode must be one of {PS_MODES}")
        if self.mate_averaging not in MATE_AVERAGING:
            raise ConfigError(f"mate_averaging must be one of {MATE_AVERAGING}")
        if self.max_parallel < 1:
            raise ConfigError("max_parallel must be at least 1")

    @classmethod
    def from_dict(cls, d: dict, out_dir_fallback: str | None = None) -> "RunConfig":
        if "seed" not in d or d["seed"] is None:
            raise ConfigError("config must carry an explicit seed")
        seed = int(d["seed"])
        try:
            schema = SchemaConfig.from_dict(d["schema"])
            input_path = Path(d["input"])
        except KeyError as e:
            raise ConfigError(f"config is missing required key {e}") from e
        out_dir = d.get("out_dir") or out_dir_fallback
        if not out_dir:
            raise ConfigError("no output directory: set out_dir in the config, "
                              "pass --out-dir, or export MODWT_OUT")
        boost_d = dict(d.get("boost") or {})
        boost_d.setdefault("seed", seed)
        sens = d.get("sensitivity", {})
        sens_cfg = None
        if sens is not None:
            sens_d = dict(sens)
            sens_d.setdefault("seed", seed)
            sens_cfg = SensitivityConfig.from_dict(sens_d)
        return cls(
            input=input_path,
            schema=schema,
            out_dir=Path(out_dir),
            seed=seed,
            boost=BoostConfig.from_dict(boost_d),
            sensitivity=sens_cfg,
            ps_mode=d.get("ps_mode", "stratified"),
            mate_averaging=d.get("mate_averaging", "full_sample"),
            strict_overlap=bool(d.get("strict_overlap", False)),
            strict_balance=bool(d.get("strict_balance", False)),
            max_parallel=int(d.get("max_parallel", 1)),
        )

    @classmethod
    def from_json_file(cls, path, out_dir_fallback: str | None = None) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(d, out_dir_fallback=out_dir_fallback)

    def to_dict(self) -> dict:
        return {
            "input": str(self.input),
            "schema": self.schema.to_dict(),
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "boost": self.boost.to_dict(),
            "sensitivity": None if self.sensitivity is None
            else self.sensitivity.to_dict(),
            "ps_mode": self.ps_mode,
            "mate_averaging": self.mate_averaging,
            "strict_overlap": self.strict_overlap,
            "strict_balance": self.strict_balance,
            "max_parallel": self.max_parallel,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


@dataclass
class ReportBundle:
    """Everything one run produced, plus where it was written."""

    config: RunConfig
    dataset: Dataset
    overlap: OverlapReport
    fits: list[PropensityFit]
    balance: BalanceTable
    outcome_fit: OutcomeFit
    mates: tuple[MateEstimate, ...]
    moderation: ModerationTest
    sensitivity: dict[str, SensitivityGrid] | None
    manifest: dict
    out_dir: Path
    warnings: list[str]


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    v = float(x)
    if np.isnan(v):
        return ""
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) if not isinstance(v, str) else v for v in row])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _write_weights(out_dir: Path, fit: PropensityFit) -> list[Path]:
    wpath = out_dir / f"weights_{fit.stratum}.csv"
    _write_csv(wpath, ["row_id", "propensity", "ps_weight", "composite_weight"],
               zip(fit.row_index, fit.propensities, fit.ps_weights,
                   fit.composite_weights))
    tpath = out_dir / f"trace_{fit.stratum}.csv"
    _write_csv(tpath, ["iteration", "ks_max", "es_max"],
               ((int(it), ks, es) for it, ks, es in fit.criterion_trace))
    return [wpath, tpath]


def _write_balance(out_dir: Path, table: BalanceTable) -> list[Path]:
    paths = []
    for stratum in table.strata:
        path = out_dir / f"balance_{stratum}.csv"
        _write_csv(
            path,
            ["covariate", "level", "phase", "mean_treated", "mean_control",
             "smd", "ks", "flag_smd", "flag_ks"],
            ((r.covariate, r.level, r.phase, r.mean_treated, r.mean_control,
              r.smd, r.ks, r.flag_smd, r.flag_ks)
             for r in table.subset(stratum=stratum)),
        )
        paths.append(path)
    return paths


def _write_outcome(out_dir: Path, fit: OutcomeFit,
                   mates: tuple[MateEstimate, ...],
                   test: ModerationTest) -> list[Path]:
    ses = fit.standard_errors()
    rows = []
    for label, est, se in zip(fit.labels, fit.coefficients, ses):
        z = est / se if se > 0 else float("inf")
        rows.append((label, est, se, z, 2.0 * norm.sf(abs(z)),
                     est - WALD_Z * se, est + WALD_Z * se))
    mpath = out_dir / "outcome_model.csv"
    _write_csv(mpath, ["term", "estimate", "se", "z", "p", "ci_lo", "ci_hi"], rows)

    rd_path = out_dir / "mate.csv"
    _write_csv(rd_path, ["stratum", "risk_difference", "se", "ci_lo", "ci_hi"],
               ((m.stratum, m.risk_difference, m.se, m.ci_lo, m.ci_hi)
                for m in mates))

    t_path = out_dir / "moderation_test.json"
    _write_json(t_path, {
        "estimate": test.estimate, "se": test.se, "ci_lo": test.ci_lo,
        "ci_hi": test.ci_hi, "z_value": test.z_value, "p_value": test.p_value,
    })
    return [mpath, rd_path, t_path]


def _write_sensitivity(out_dir: Path, grids: dict[str, SensitivityGrid]) -> list[Path]:
    paths = []
    for stratum, grid in sorted(grids.items()):
        spath = out_dir / f"sensitivity_{stratum}.csv"
        rows = []
        for ie, es in enumerate(grid.es_grid):
            for ir, rho in enumerate(grid.rho_grid):
                rows.append((es, rho, grid.mean_estimate[ie, ir],
                             grid.mean_p[ie, ir], int(grid.n_ok[ie, ir]),
                             int(grid.n_failed[ie, ir])))
        _write_csv(spath, ["es", "rho", "mean_estimate", "mean_p",
                           "n_ok", "n_failed"], rows)
        bpath = out_dir / f"benchmarks_{stratum}.csv"
        _write_csv(bpath, ["covariate", "level", "es", "rho"],
                   ((b.covariate, b.level, b.es, b.rho)
                    for b in grid.benchmarks))
        paths.extend([spath, bpath])
    return paths


def emit_plots(bundle: ReportBundle) -> list[Path]:
    """Best-effort SVG emission; failures become bundle warnings."""
    from . import plots

    written: list[Path] = []
    for stratum in bundle.balance.strata:
        try:
            written.append(plots.love_plot(
                bundle.balance, stratum,
                bundle.out_dir / f"balance_{stratum}.svg"))
        except Exception as e:  # plots must never fail the pipeline
            bundle.warnings.append(f"love plot for stratum {stratum} failed: {e}")
    if bundle.sensitivity:
        p_contours = (bundle.config.sensitivity.p_contours
                      if bundle.config.sensitivity else (0.05,))
        for stratum, grid in sorted(bundle.sensitivity.items()):
            try:
                written.append(plots.sensitivity_plot(
                    grid, bundle.out_dir / f"sensitivity_{stratum}.svg",
                    p_contours=p_contours))
            except Exception as e:
                bundle.warnings.append(
                    f"sensitivity plot for stratum {stratum} failed: {e}")
    else:
        bundle.warnings.append("sensitivity disabled: no sensitivity SVG emitted")
    return written


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_pipeline(cfg: RunConfig) -> ReportBundle:
    """Execute every step in order and write all artifacts under out_dir."""
    if not cfg.input.exists():
        raise ConfigError(f"input file {cfg.input} does not exist")
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / "FAILED"
    if marker.exists():
        marker.unlink()

    warnings: list[str] = []
    timings: dict[str, float] = {}
    files: list[Path] = []
    step = "load"
    try:
        t0 = time.perf_counter()
        ds = load_dataset(cfg.input, cfg.schema)
        timings["load"] = time.perf_counter() - t0

        step = "overlap"
        t0 = time.perf_counter()
        report = overlap_report(ds)
        opath = out_dir / "overlap.json"
        opath.write_text(report.to_json() + "\n", encoding="utf-8")
        tpath = out_dir / "overlap.txt"
        tpath.write_text(report.to_text(), encoding="utf-8")
        files += [opath, tpath]
        if not report.ok:
            msg = (f"overlap audit found {len(report.empty_cells)} empty cells "
                   f"and {len(report.range_violations)} range violations")
            if cfg.strict_overlap:
                raise StrictGateError(msg + " (aborting: strict overlap mode)")
            warnings.append("WARNING: " + msg + "; proceeding")
        timings["overlap"] = time.perf_counter() - t0

        step = "propensity"
        t0 = time.perf_counter()
        if cfg.ps_mode == "stratified":
            fits = fit_stratified(ds, cfg.boost)
        else:
            fits = [fit_pooled(ds, cfg.boost)]
        for fit in fits:
            files += _write_weights(out_dir, fit)
        timings["propensity"] = time.perf_counter() - t0

        step = "balance"
        t0 = time.perf_counter()
        table = balance_table(ds, fits)
        files += _write_balance(out_dir, table)
        post_flagged = [r for r in table.subset(phase="post")
                        if r.flag_smd or r.flag_ks]
        if post_flagged:
            msg = (f"{len(post_flagged)} covariate levels remain imbalanced "
                   f"after weighting")
            if cfg.strict_balance:
                raise StrictGateError(msg + " (aborting: strict balance mode)")
            warnings.append("WARNING: " + msg)
        timings["balance"] = time.perf_counter() - t0

        step = "outcome"
        t0 = time.perf_counter()
        composite = np.empty(ds.n_rows, dtype=np.float64)
        for fit in fits:
            composite[fit.row_index] = fit.composite_weights
        design = build_outcome_design(ds, include_moderator=True)
        outcome_fit = fit_weighted_logistic(design, ds.outcome, composite)
        mates = mate_estimates(outcome_fit, design, composite,
                               moderator=ds.moderator,
                               averaging=cfg.mate_averaging)
        test = moderation_test(outcome_fit)
        files += _write_outcome(out_dir, outcome_fit, mates, test)
        timings["outcome"] = time.perf_counter() - t0

        grids = None
        if cfg.sensitivity is not None:
            step = "sensitivity"
            t0 = time.perf_counter()
            grids = ov_grid(ds, fits, cfg.sensitivity)
            files += _write_sensitivity(out_dir, grids)
            timings["sensitivity"] = time.perf_counter() - t0

        bundle = ReportBundle(config=cfg, dataset=ds, overlap=report,
                              fits=fits, balance=table, outcome_fit=outcome_fit,
                              mates=mates, moderation=test, sensitivity=grids,
                              manifest={}, out_dir=out_dir, warnings=warnings)

        step = "plots"
        t0 = time.perf_counter()
        files += emit_plots(bundle)
        timings["plots"] = time.perf_counter() - t0

        step = "manifest"
        manifest = {
            "config_hash": cfg.config_hash(),
            "config": cfg.to_dict(),
            "versions": _versions(),
            "n_rows": ds.n_rows,
            "n_dropped": ds.n_dropped,
            "timings_seconds": {k: round(v, 6) for k, v in timings.items()},
            "warnings": warnings,
            "files": {p.name: _sha256(p) for p in sorted(set(files))},
        }
        _write_json(out_dir / "manifest.json", manifest)
        bundle.manifest = manifest
        return bundle
    except Exception as e:
        marker.write_text(f"step: {step}\nerror: {e}\n", encoding="utf-8")
        raise


def _versions() -> dict:
    import matplotlib
    import scipy

    return {
        "modwt": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "matplotlib": matplotlib.__version__,
    }
