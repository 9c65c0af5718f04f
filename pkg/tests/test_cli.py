import json
import shutil
import subprocess

import pytest

from atsclab.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VALIDATION, main

from conftest import cross_doc


def run_json(capsys, argv):
    code = main(argv + ["--json"])
    out = capsys.readouterr().out
    return code, (json.loads(out) if out.strip() else None)


def test_validate_bundled(capsys):
    code, doc = run_json(capsys, ["validate", "single_intersection"])
    assert code == EXIT_OK
    assert doc["valid"] and doc["inbound_lanes"] == 12 and doc["routes"] == 12
    assert doc["config"]["scenario"] == "single_intersection"


def test_validate_routes_table(capsys):
    assert main(["validate", "single_intersection", "--routes"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "e_in > w_out" in out and "weight" in out


def test_validate_bad_scenario(tmp_path, capsys):
    doc = cross_doc()
    doc["edges"][0]["to"] = "Q"
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(doc))
    assert main(["validate", str(p)]) == EXIT_VALIDATION
    assert "'Q'" in capsys.readouterr().err


def test_missing_scenario_file(tmp_path):
    assert main(["validate", str(tmp_path / "none.json")]) == EXIT_VALIDATION


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["train", "single_intersection", "--seeds", "0"],
    ["train", "single_intersection", "--workers", "0"],
    ["evaluate", "single_intersection", "--method", "static:9"],
    ["compare", "single_intersection", "--methods", ","],
    ["sweep-static", "single_intersection", "--eval-seeds", "0"],
])
def test_usage_errors(argv, tmp_path, capsys):
    assert main(argv + ["--out", str(tmp_path)]) == EXIT_USAGE


def test_help_is_ok(capsys):
    assert main(["--help"]) == EXIT_OK


def test_missing_checkpoint_is_runtime_error(tmp_path, capsys):
    code = main(["evaluate", "single_intersection", "--method", f"dqn:{tmp_path}/nothing",
                 "--eval-seeds", "1", "--cycles", "1", "--warmup", "0", "--out", str(tmp_path)])
    assert code == EXIT_RUNTIME
    assert "checkpoint" in capsys.readouterr().err


def test_train_then_evaluate(tmp_path, capsys):
    cfg = tmp_path / "agent.json"
    cfg.write_text(json.dumps({"warmup": 5, "batch_size": 4}))
    code, doc = run_json(capsys, ["train", "single_intersection", "--seeds", "2", "--cycles", "12",
                                  "--agent-config", str(cfg), "--out", str(tmp_path)])
    assert code == EXIT_OK and len(doc["runs"]) == 2
    assert (tmp_path / "runs/seed1000/checkpoint.json").is_file()
    assert (tmp_path / "runs/seed1001/checkpoint.json").is_file()
    code, doc = run_json(capsys, ["evaluate", "single_intersection", "--method", f"dqn:{tmp_path}/runs",
                                  "--eval-seeds", "2", "--cycles", "3", "--warmup", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert len(doc["samples"]["travel_time"]) == 2
    outdir = tmp_path / "eval/single_intersection/dqn"
    assert len(list(outdir.glob("rollout*_seed?.csv"))) == 4
    assert len(list(outdir.glob("*_plans_I.csv"))) == 4


def test_text_mode_prints_config(tmp_path, capsys):
    assert main(["evaluate", "single_intersection", "--method", "static:1", "--eval-seeds", "2",
                 "--cycles", "2", "--warmup", "1", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.startswith("config: {")
    assert '"method": "static:1"' in out


def test_compare_single_method_notice(tmp_path, capsys):
    code, doc = run_json(capsys, ["compare", "single_intersection", "--methods", "static:1", "--eval-seeds", "2",
                                  "--cycles", "2", "--warmup", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert doc["anova"] is None
    assert any("fewer than two methods" in n for n in doc["notices"])


def test_sweep_and_calibrate(tmp_path, capsys):
    code, doc = run_json(capsys, ["sweep-static", "single_intersection", "--eval-seeds", "2", "--cycles", "4",
                                  "--warmup", "1", "--out", str(tmp_path)])
    assert code == EXIT_OK and len(doc["table"]) == 7 and 0 <= doc["best"] <= 6
    code, doc = run_json(capsys, ["calibrate", "single_intersection", "--cycles", "10"])
    assert code == EXIT_OK and doc["scale"] > 0


@pytest.mark.skipif(shutil.which("atsclab") is None, reason="console script not installed")
def test_console_script():
    proc = subprocess.run(["atsclab", "validate", "arterial_3", "--json"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["intersections"] == 3
