import json
import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np
import pytest

from modwt.cli import main as cli_main
from modwt.demo import demo_schema, write_demo_csv
from modwt.errors import ConfigError, StrictGateError
from modwt.pipeline import RunConfig, run_pipeline

from _util import csv_bytes


def small_config(tmp_path, n=500, seed=3, **overrides):
    data = tmp_path / "data.csv"
    if not data.exists():
        write_demo_csv(data, n=n, seed=seed)
    cfg = {
        "input": str(data),
        "schema": demo_schema().to_dict(),
        "boost": {"n_trees": 40, "shrinkage": 0.1, "stop_method": "es_max",
                  "eval_stride": 10},
        "sensitivity": {"es_grid": [-0.2, 0.0, 0.2], "rho_grid": [0.0, 0.1],
                        "n_reps": 4},
        "out_dir": str(tmp_path / "out"),
        "seed": seed,
    }
    cfg.update(overrides)
    return cfg


EXPECTED_FILES = [
    "overlap.json", "overlap.txt",
    "weights_0.csv", "weights_1.csv", "trace_0.csv", "trace_1.csv",
    "balance_0.csv", "balance_1.csv", "balance_0.svg", "balance_1.svg",
    "outcome_model.csv", "mate.csv", "moderation_test.json",
    "sensitivity_0.csv", "sensitivity_1.csv",
    "benchmarks_0.csv", "benchmarks_1.csv",
    "sensitivity_0.svg", "sensitivity_1.svg",
    "manifest.json",
]


def test_run_pipeline_emits_every_artifact(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path))
    bundle = run_pipeline(cfg)
    out = Path(cfg.out_dir)
    for name in EXPECTED_FILES:
        assert (out / name).exists(), name
    assert not (out / "FAILED").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == cfg.config_hash()
    # every emitted file is listed with its digest
    import hashlib
    for name, digest in manifest["files"].items():
        assert digest == hashlib.sha256((out / name).read_bytes()).hexdigest()
    listed = set(manifest["files"])
    on_disk = {p.name for p in out.iterdir()} - {"manifest.json", "data.csv"}
    assert listed == on_disk
    assert bundle.mates[0].stratum == "0"
    assert bundle.sensitivity is not None


def test_rerun_reproduces_outputs_byte_for_byte(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path))
    run_pipeline(cfg)
    out = Path(cfg.out_dir)
    before = {p.name: p.read_bytes() for p in out.iterdir()
              if p.name != "manifest.json"}
    manifest_before = json.loads((out / "manifest.json").read_text())
    run_pipeline(cfg)
    for name, blob in before.items():
        assert (out / name).read_bytes() == blob, name
    manifest_after = json.loads((out / "manifest.json").read_text())
    assert manifest_before["files"] == manifest_after["files"]
    assert manifest_before["config_hash"] == manifest_after["config_hash"]


def test_missing_seed_rejected(tmp_path):
    cfg = small_config(tmp_path)
    del cfg["seed"]
    with pytest.raises(ConfigError, match="seed"):
        RunConfig.from_dict(cfg)


def test_missing_input_rejected(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path, input=str(tmp_path / "nope.csv")))
    with pytest.raises(ConfigError, match="does not exist"):
        run_pipeline(cfg)


def test_strict_balance_gate_aborts_with_marker(tmp_path):
    # a single tree cannot balance the confounded demo data
    cfg = RunConfig.from_dict(small_config(
        tmp_path, boost={"n_trees": 1, "shrinkage": 0.01},
        strict_balance=True))
    with pytest.raises(StrictGateError):
        run_pipeline(cfg)
    marker = Path(cfg.out_dir) / "FAILED"
    assert marker.exists()
    assert "balance" in marker.read_text()


def test_sensitivity_disabled_skips_svg_with_warning(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path, sensitivity=None))
    bundle = run_pipeline(cfg)
    out = Path(cfg.out_dir)
    assert not (out / "sensitivity_0.svg").exists()
    assert not (out / "sensitivity_0.csv").exists()
    assert any("sensitivity disabled" in w for w in bundle.warnings)
    assert (out / "manifest.json").exists()


def test_svgs_are_well_formed(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path))
    run_pipeline(cfg)
    for name in ("balance_0.svg", "sensitivity_1.svg"):
        root = ET.parse(Path(cfg.out_dir) / name).getroot()
        assert root.tag.endswith("svg")


def test_pooled_mode_runs(tmp_path):
    cfg = RunConfig.from_dict(small_config(tmp_path, ps_mode="pooled",
                                           sensitivity=None))
    bundle = run_pipeline(cfg)
    assert [f.stratum for f in bundle.fits] == ["pooled"]
    out = Path(cfg.out_dir)
    assert (out / "weights_pooled.csv").exists()
    # balance is still reported within each moderator level
    assert (out / "balance_0.csv").exists()
    assert (out / "balance_1.csv").exists()


def test_within_stratum_averaging_mode(tmp_path):
    cfg_a = RunConfig.from_dict(small_config(tmp_path, sensitivity=None))
    full = run_pipeline(cfg_a).mates
    cfg_b = RunConfig.from_dict(small_config(
        tmp_path, sensitivity=None, mate_averaging="within_stratum",
        out_dir=str(tmp_path / "out_b")))
    within = run_pipeline(cfg_b).mates
    assert full[0].risk_difference != within[0].risk_difference


def test_max_parallel_flag_does_not_change_results(tmp_path):
    cfg_a = RunConfig.from_dict(small_config(tmp_path, sensitivity=None))
    a = run_pipeline(cfg_a)
    cfg_b = RunConfig.from_dict(small_config(
        tmp_path, sensitivity=None, max_parallel=8,
        out_dir=str(tmp_path / "out_p")))
    b = run_pipeline(cfg_b)
    assert a.mates[1].risk_difference == b.mates[1].risk_difference
    assert (Path(cfg_a.out_dir) / "mate.csv").read_bytes() == \
        (Path(cfg_b.out_dir) / "mate.csv").read_bytes()


# -- CLI ---------------------------------------------------------------------

def test_cli_validate_config(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(small_config(tmp_path)))
    assert cli_main(["validate-config", "--config", str(cfg_path)]) == 0
    assert "config OK" in capsys.readouterr().out


def test_cli_bad_config_exits_one(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text("{not json")
    assert cli_main(["validate-config", "--config", str(cfg_path)]) == 1
    cfg = small_config(tmp_path)
    del cfg["seed"]
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path)]) == 1


def test_cli_unknown_column_exits_one(tmp_path, capsys):
    cfg = small_config(tmp_path)
    cfg["schema"]["covariates"][0]["name"] = "not_a_column"
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path)]) == 1
    assert "not_a_column" in capsys.readouterr().err


def test_cli_separation_exits_two(tmp_path, capsys):
    # outcome exactly equals treatment: the doubly robust model separates
    rng = np.random.default_rng(0)
    n = 120
    t = rng.integers(0, 2, n)
    rows = [[int(t[i]), int(rng.integers(0, 2)), int(t[i]),
             "ab"[int(rng.integers(0, 2))]] for i in range(n)]
    data = tmp_path / "sep.csv"
    data.write_bytes(csv_bytes(["t", "z", "y", "g"], rows))
    cfg = {
        "input": str(data),
        "schema": {"treatment": "t", "moderator": "z", "outcome": "y",
                   "survey_weight": None,
                   "covariates": [{"name": "g", "kind": "categorical",
                                   "levels": ["a", "b"]}]},
        "boost": {"n_trees": 10, "shrinkage": 0.1},
        "sensitivity": None,
        "out_dir": str(tmp_path / "out_sep"),
        "seed": 1,
    }
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path)]) == 2
    marker = tmp_path / "out_sep" / "FAILED"
    assert marker.exists()
    assert "outcome" in marker.read_text()


def test_cli_strict_balance_exits_three(tmp_path):
    cfg = small_config(tmp_path, boost={"n_trees": 1, "shrinkage": 0.01},
                       sensitivity=None)
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    assert cli_main(["run", "--config", str(cfg_path),
                     "--strict-balance"]) == 3


def test_cli_out_dir_env_fallback(tmp_path, monkeypatch):
    cfg = small_config(tmp_path, sensitivity=None)
    del cfg["out_dir"]
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(cfg))
    target = tmp_path / "from_env"
    monkeypatch.setenv("MODWT_OUT", str(target))
    assert cli_main(["run", "--config", str(cfg_path)]) == 0
    assert (target / "mate.csv").exists()


def test_cli_seed_override_changes_hash(tmp_path, capsys):
    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps(small_config(tmp_path, sensitivity=None)))
    assert cli_main(["run", "--config", str(cfg_path), "--seed", "99",
                     "--out-dir", str(tmp_path / "o99")]) == 0
    manifest = json.loads((tmp_path / "o99" / "manifest.json").read_text())
    assert manifest["config"]["seed"] == 99
    assert manifest["config"]["boost"]["seed"] == 99


def test_cli_demo_smoke(tmp_path):
    out = tmp_path / "demo"
    assert cli_main(["demo", "--out-dir", str(out), "--seed", "5",
                     "--n", "600"]) == 0
    assert (out / "demo_data.csv").exists()
    assert (out / "demo_config.json").exists()
    assert (out / "mate.csv").exists()
    assert (out / "manifest.json").exists()


def test_full_demo_run_is_fast_and_passes_all_flags(tmp_path):
    import csv
    import time

    out = tmp_path / "demo_full"
    t0 = time.perf_counter()
    assert cli_main(["demo", "--out-dir", str(out), "--seed", "17"]) == 0
    elapsed = time.perf_counter() - t0
    assert elapsed < 300.0
    for stratum in ("0", "1"):
        with open(out / f"balance_{stratum}.csv", newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["phase"] == "post"]
        assert rows
        assert all(r["flag_smd"] == "false" and r["flag_ks"] == "false"
                   for r in rows)


def test_exported_trace_reproducible_from_exported_weights(tmp_path):
    # the balance criterion recorded in the trace must be recomputable from
    # the weights file through the balance module
    import csv

    from modwt import balance as bal
    from modwt.boosting import _criterion_matrix
    from modwt.data import encode, load_dataset, stratify

    cfg = RunConfig.from_dict(small_config(tmp_path, sensitivity=None))
    run_pipeline(cfg)
    out = Path(cfg.out_dir)
    ds = load_dataset(cfg.input, cfg.schema)
    for z in (0, 1):
        sub = stratify(ds, z)
        with open(out / f"weights_{z}.csv", newline="") as fh:
            composite = np.array([float(r["composite_weight"])
                                  for r in csv.DictReader(fh)])
        cols = _criterion_matrix(encode(sub))
        ks = max(bal.weighted_ks(cols[:, j], sub.treatment, composite)
                 for j in range(cols.shape[1]))
        es = max(abs(bal.weighted_smd(cols[:, j], sub.treatment, composite,
                                      denom_weights=sub.survey_weights))
                 for j in range(cols.shape[1]))
        with open(out / f"trace_{z}.csv", newline="") as fh:
            trace = [(float(r["ks_max"]), float(r["es_max"]))
                     for r in csv.DictReader(fh)]
        # the exported weights realize the trace's minimum of the stop metric
        best_es = min(t[1] for t in trace)
        assert abs(es - best_es) <= 1e-12
        assert any(abs(ks - tk) <= 1e-12 and abs(es - te) <= 1e-12
                   for tk, te in trace)


def test_unknown_config_section_keys_rejected(tmp_path):
    import pytest as _pytest

    from modwt.errors import ConfigError

    cfg = small_config(tmp_path, boost={"n_trees": 10, "shrinkge": 0.1})
    with _pytest.raises(ConfigError, match="shrinkge"):
        RunConfig.from_dict(cfg)
    cfg = small_config(tmp_path, sensitivity={"rho_gird": [0.0]})
    with _pytest.raises(ConfigError, match="rho_gird"):
        RunConfig.from_dict(cfg)
