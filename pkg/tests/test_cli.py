"""CLI: config file parsing, exit codes, scenario dispatch, plot data."""

import csv
import json

import pytest

from fedpoison import cli

TINY = """
# fast experiment for the cli tests
rounds = 2
phase_switch_round = 3
seed = 3
data.train_per_class = 30
data.test_per_class = 10
data.trigger_rate = 0.5
data.hash_dim = 64
"""


def _write_tiny(tmp_path, extra=""):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY + extra)
    return str(path)


# ---------------------------------------------------------------------------
# flat file parsing

def test_read_flat_file_key_value_with_comments(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("rounds=5  # inline comment\n\n# full-line comment\nlr = 0.1\n")
    assert cli._read_flat_file(str(p)) == {"rounds": "5", "lr": "0.1"}


def test_read_flat_file_json(tmp_path):
    p = tmp_path / "c.json"
    p.write_text('{"rounds": 5, "defense.lambda": 1.5}\n')
    assert cli._read_flat_file(str(p)) == {"rounds": 5, "defense.lambda": 1.5}


def test_read_flat_file_errors(tmp_path):
    with pytest.raises(cli.ConfigError, match="not found"):
        cli._read_flat_file(str(tmp_path / "nope.cfg"))
    p = tmp_path / "bad.cfg"
    p.write_text("rounds 5\n")
    with pytest.raises(cli.ConfigError, match="expected key=value"):
        cli._read_flat_file(str(p))


def test_parse_config_unknown_key_is_config_error(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("frobnicate=1\n")
    with pytest.raises(cli.ConfigError, match="unknown config keys"):
        cli.parse_config(str(p))


def test_parse_config_overrides_skip_underscore_keys():
    cfg = cli.parse_config(None, {"rounds": "15", "_name": "ignored"})
    assert cfg.rounds == 15


# ---------------------------------------------------------------------------
# main / exit codes

def test_run_command_success_and_artifacts(tmp_path, capsys):
    cfg_path = _write_tiny(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", cfg_path, "--out", str(out)]) == 0
    assert (out / "rounds.csv").exists()
    assert "final_accuracy=" in capsys.readouterr().out


def test_run_command_seed_override(tmp_path):
    cfg_path = _write_tiny(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", cfg_path, "--out", str(out), "--seed", "77"]) == 0
    snap = json.loads((out / "config.json").read_text())
    assert snap["seed"] == 77


def test_bad_config_exit_code_1(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("defense=firewall\n")
    assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 1
    assert "config error" in capsys.readouterr().err


def test_runtime_error_exit_code_2(tmp_path, capsys):
    assert cli.main(["plotdata", str(tmp_path / "missing")]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_scenario_exit_code_1(tmp_path, capsys):
    assert cli.main(["scenario", "nope", "--out", str(tmp_path / "o")]) == 1
    assert "unknown scenario" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# scenarios

def test_scenario_table_shapes():
    assert set(cli.SCENARIOS) == {
        "baseline_clean", "naive_vs_each_defense", "grmp_vs_cosine",
        "grmp_vs_krum", "sweep_lambda", "sweep_alpha",
    }
    for variants in cli.SCENARIOS.values():
        if len(variants) > 1:
            names = [v["_name"] for v in variants]
            assert len(set(names)) == len(names)


# ---------------------------------------------------------------------------
# run -> plotdata pipeline

def test_plotdata_from_run_dir(tmp_path):
    cfg_path = _write_tiny(tmp_path)
    out = tmp_path / "run"
    assert cli.main(["run", "--config", cfg_path, "--out", str(out)]) == 0
    assert cli.main(["plotdata", str(out)]) == 0
    with open(out / "fig4_data.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["round"] for r in rows] == ["1", "2"]
    assert all(set(r) == {"round", "accuracy", "asr"} for r in rows)
    with open(out / "fig5_data.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    assert set(rows[0]) == {"round", "threshold"} | {f"client_{i}" for i in range(6)}


# ---------------------------------------------------------------------------
# rerun-from-snapshot (the reproducibility contract at CLI level)

def test_rerun_from_snapshot_byte_identical(tmp_path):
    cfg_path = _write_tiny(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(["run", "--config", cfg_path, "--out", str(a)]) == 0
    assert cli.main(["run", "--config", str(a / "config.json"), "--out", str(b)]) == 0
    assert (a / "rounds.csv").read_bytes() == (b / "rounds.csv").read_bytes()
