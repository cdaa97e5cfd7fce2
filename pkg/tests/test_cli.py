import json
import shutil

import pytest
import yaml

from aqkit.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE,
                       cmd_run, main)
from aqkit.config import ConfigError, PipelineConfig, from_dict, load_config

OUTPUTS = ("checkpoint", "calibration", "sensitivity", "assignment", "quantized", "pack", "report")


def write_cfg(d, data=None):
    p = d / "cfg.yaml"
    p.write_text(yaml.safe_dump(data or {}))
    return str(p)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run_a")
    assert main(["run", "-c", write_cfg(d)]) == EXIT_OK
    return d


def test_run_writes_every_artifact(run_dir):
    cfg = load_config(run_dir / "cfg.yaml")
    for k in OUTPUTS:
        assert cfg.path(k).exists(), k
    assert (run_dir / "report.txt").exists()
    r = json.loads((run_dir / "report.json").read_text())
    for key in ("sensitivity", "assignment", "layer_errors", "achieved_bpw", "success"):
        assert key in r
    assert r["achieved_bpw"]["code"] <= 3.0 + 1e-9


def test_run_is_deterministic(run_dir, tmp_path):
    assert main(["run", "-c", write_cfg(tmp_path)]) == EXIT_OK
    for name in ("model.aqpk", "report.json", "policy.aqck", "calib.aqcb"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_subcommands_compose_to_run(run_dir, tmp_path):
    cfg = write_cfg(tmp_path)
    for cmd in ("train", "calibrate", "sensitivity", "allocate", "quantize", "pack", "report"):
        assert main([cmd, "-c", cfg]) == EXIT_OK, cmd
    for name in ("model.aqpk", "report.json", "assignment.json", "sensitivity.json"):
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def _with_checkpoint(run_dir, d, data):
    shutil.copy(run_dir / "policy.aqck", d / "policy.aqck")
    return load_config(write_cfg(d, data))


def test_budget_eight_is_near_lossless(run_dir, tmp_path):
    r = cmd_run(_with_checkpoint(run_dir, tmp_path, {"quant": {"budget": 8.0}}))
    assert set(r["bits"].values()) == {8}
    s = r["success"]
    assert abs(s["full_precision"] - s["quantized"]) <= 0.02


def test_fractional_budget_gives_mixed_assignment(run_dir, tmp_path):
    r = cmd_run(_with_checkpoint(run_dir, tmp_path, {"quant": {"budget": 2.5}}))
    assert len(set(r["bits"].values())) >= 2
    assert r["achieved_bpw"]["code"] <= 2.5 + 1e-9


def test_exact_solver_flag(run_dir, tmp_path):
    cfg = _with_checkpoint(run_dir, tmp_path, {})
    for cmd in (["calibrate"], ["sensitivity"], ["allocate", "--exact"]):
        assert main([cmd[0], "-c", str(tmp_path / "cfg.yaml")] + cmd[1:]) == EXIT_OK
    a = json.loads(cfg.path("assignment").read_text())
    assert a["solver"] == "exact" and a["achieved_bpw"] <= 3.0 + 1e-9


def test_eval_and_inspect(run_dir, capsys):
    cfg = str(run_dir / "cfg.yaml")
    assert main(["eval", "-c", cfg, "--pack", str(run_dir / "model.aqpk"), "--episodes", "50"]) == 0
    assert "success" in capsys.readouterr().out
    assert main(["inspect", str(run_dir / "model.aqpk")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "AQPK" in out and "1.up" in out


def test_ablate_writes_csv(run_dir, tmp_path):
    out = tmp_path / "ladder.csv"
    assert main(["ablate", "-c", str(run_dir / "cfg.yaml"), "--bpw", "3.0", "--episodes", "20",
                 "--out", str(out)]) == EXIT_OK
    rows = out.read_text().splitlines()
    assert rows[0].startswith("rung,name") and len(rows) == 6


# exit codes

def test_usage_error_exit_code():
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == EXIT_USAGE


@pytest.mark.parametrize("text", ["quant: [1, 2", "quant: {bogus: 1}", "quant: {budget: 1.0}",
                                  "quant: {menu: [2, 2]}", "seed: zero"])
def test_config_errors(tmp_path, text):
    p = tmp_path / "cfg.yaml"
    p.write_text(text)
    assert main(["sensitivity", "-c", str(p)]) == EXIT_CONFIG


def test_missing_input_is_config_error(tmp_path):
    assert main(["calibrate", "-c", write_cfg(tmp_path)]) == EXIT_CONFIG


def test_corrupt_data_exit_code(run_dir, tmp_path):
    cfg = _with_checkpoint(run_dir, tmp_path, {})
    cfg.path("calibration").write_bytes(b"AQCB garbage")
    assert main(["sensitivity", "-c", str(tmp_path / "cfg.yaml")]) == EXIT_DATA


def test_divergence_exit_code(tmp_path, capsys):
    cfg = write_cfg(tmp_path, {"train": {"lr": 50.0, "steps": 50, "head_steps": 1}})
    assert main(["train", "-c", cfg]) == EXIT_NUMERIC
    assert "stage train failed" in capsys.readouterr().err


def test_io_error_exit_code(tmp_path):
    assert main(["inspect", str(tmp_path / "missing.aqpk")]) == EXIT_IO


def test_stage_error_reports_artifact_hashes(run_dir, tmp_path, capsys):
    cfg = _with_checkpoint(run_dir, tmp_path, {})
    cfg.path("calibration").write_bytes(b"nope")
    assert main(["sensitivity", "-c", str(tmp_path / "cfg.yaml")]) == EXIT_DATA
    assert "artifact checkpoint sha256=" in capsys.readouterr().err


# config

def test_empty_config_equals_defaults():
    assert from_dict({}).to_dict() == PipelineConfig().to_dict()


def test_substreams_are_distinct_and_stable():
    c = PipelineConfig()
    assert c.substream("train") == PipelineConfig().substream("train")
    assert len({c.substream(n) for n in ("train", "calib", "eval")}) == 3


def test_config_rejects_bad_values():
    for bad in ({"quant": {"amf_alpha": 2.0}}, {"quant": {"overhead": "x"}},
                {"calibration": {"K": 1}}, {"arch": {"activation": "gelu"}}, {"paths": 3}):
        with pytest.raises(ConfigError):
            from_dict(bad)
