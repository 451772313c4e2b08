"""Command line entry point: `modwt run|demo|validate-config`.

Exit codes: 0 success, 1 input/config error, 2 statistical failure
(separation, non-convergence), 3 overlap/balance abort under strict
flags. The MODWT_OUT environment variable is the out-dir fallback when
neither the flag nor the config provides one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .demo import demo_run_config, write_demo_csv
from .errors import ModwtError
from .pipeline import RunConfig, run_pipeline


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modwt",
        description="Propensity-score-weighted moderation analysis pipeline")
    parser.add_argument("--version", action="version",
                        version=f"modwt {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run the full pipeline from a JSON config")
    run_p.add_argument("--config", required=True, help="path to run config JSON")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
    run_p.add_argument("--out-dir", default=None,
                       help="override the output directory")
    run_p.add_argument("--strict-overlap", action="store_true",
                       help="abort when the overlap audit finds violations")
    run_p.add_argument("--strict-balance", action="store_true",
                       help="abort when post-weighting balance flags fire")
    run_p.add_argument("--max-parallel", type=int, default=None,
                       help="parallelism cap (never changes results)")

    demo_p = sub.add_parser(
        "demo", help="generate the synthetic demo data and run the pipeline")
    demo_p.add_argument("--out-dir", default=None)
    demo_p.add_argument("--seed", type=int, default=17)
    demo_p.add_argument("--n", type=int, default=4000,
                        help="number of synthetic rows")

    val_p = sub.add_parser("validate-config",
                           help="parse and validate a run config, then exit")
    val_p.add_argument("--config", required=True)
    return parser


def _resolve_run_config(args) -> RunConfig:
    fallback = args.out_dir or os.environ.get("MODWT_OUT")
    cfg = RunConfig.from_json_file(args.config, out_dir_fallback=fallback)
    overrides = {}
    if args.out_dir:
        overrides["out_dir"] = Path(args.out_dir)
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["boost"] = replace(cfg.boost, seed=args.seed)
        if cfg.sensitivity is not None:
            overrides["sensitivity"] = replace(cfg.sensitivity, seed=args.seed)
    if args.strict_overlap:
        overrides["strict_overlap"] = True
    if args.strict_balance:
        overrides["strict_balance"] = True
    if args.max_parallel is not None:
        overrides["max_parallel"] = args.max_parallel
    return replace(cfg, **overrides) if overrides else cfg


def _print_summary(bundle) -> None:
    for w in bundle.warnings:
        print(w, file=sys.stderr)
    print(f"rows analyzed: {bundle.dataset.n_rows} "
          f"(dropped during ingestion: {bundle.dataset.n_dropped})")
    print(f"overlap audit: {'clean' if bundle.overlap.ok else 'VIOLATIONS'}")
    for fit in bundle.fits:
        print(f"stratum {fit.stratum}: selected iteration "
              f"{fit.selected_iteration}, ESS treated {fit.ess_treated:.1f}, "
              f"control {fit.ess_control:.1f}")
    for stratum in bundle.balance.strata:
        print(f"stratum {stratum}: post-weighting max |SMD| = "
              f"{bundle.balance.max_abs_smd(stratum, 'post'):.4f}, "
              f"max KS = {bundle.balance.max_ks(stratum, 'post'):.4f}")
    for m in bundle.mates:
        print(f"stratum {m.stratum}: risk difference {m.risk_difference:.4f} "
              f"(95% CI {m.ci_lo:.4f} to {m.ci_hi:.4f})")
    t = bundle.moderation
    print(f"moderation test: interaction {t.estimate:.4f} "
          f"(95% CI {t.ci_lo:.4f} to {t.ci_hi:.4f}), p = {t.p_value:.4g}")
    print(f"artifacts written to {bundle.out_dir}")


def _cmd_run(args) -> int:
    cfg = _resolve_run_config(args)
    bundle = run_pipeline(cfg)
    _print_summary(bundle)
    return 0


def _cmd_demo(args) -> int:
    out_dir = Path(args.out_dir or os.environ.get("MODWT_OUT") or "modwt_demo")
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / "demo_data.csv"
    write_demo_csv(data_path, n=args.n, seed=args.seed)
    cfg_dict = demo_run_config(data_path, out_dir, seed=args.seed)
    cfg_path = out_dir / "demo_config.json"
    cfg_path.write_text(json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    print(f"demo data: {data_path}")
    print(f"demo config: {cfg_path}")
    bundle = run_pipeline(RunConfig.from_dict(cfg_dict))
    _print_summary(bundle)
    return 0


def _cmd_validate(args) -> int:
    cfg = RunConfig.from_json_file(args.config,
                                   out_dir_fallback=os.environ.get("MODWT_OUT"))
    print(f"config OK (hash {cfg.config_hash()[:12]}, seed {cfg.seed}, "
          f"ps_mode {cfg.ps_mode})")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "demo": _cmd_demo,
                "validate-config": _cmd_validate}
    try:
        return handlers[args.command](args)
    except ModwtError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
