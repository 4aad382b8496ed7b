import csv
import json
import subprocess
import sys

import pytest

from pam_ageing import cli
from pam_ageing.analytics import PRESETS
from pam_ageing.limit import nu_region_mass

SMALL = {
    "itheta": ["--theta", "0", "1", "1000"],
    "nu-mass": ["--theta", "0.5", "--r", "2", "--y", "1.5"],
    "sample-limit": ["--window", "box", "--L", "20", "--u-min", "0.3", "--seed", "3"],
    "cone-path": ["--t-lo", "1", "--t-hi", "5", "--seed", "2"],
    "track": ["--seed", "7", "--t0", "2", "--t1", "200"],
    "solve": ["--seed", "5", "--t-end", "4", "--n-obs", "8", "--residual-t", "1"],
    "persistence": ["--t", "50", "--theta", "0.5", "1", "--n-reps", "12", "--seed", "4"],
    "moderate-dev": ["--t", "100", "200", "--n-reps", "6"],
    "envelope": ["--n-grid", "12", "--h-choice", "divergent"],
    "scaling-check": ["--T-list", "100", "1000", "--n-reps", "10"],
}


def run_cmd(cmd, args, out):
    return cli.run([cmd, *args, "--out", str(out), "--jobs", "1"])


def artifacts(folder):
    return {p.name: p.read_bytes() for p in sorted(folder.iterdir())}


def test_every_command_has_a_small_case():
    assert set(SMALL) == set(cli.COMMANDS)


@pytest.mark.parametrize("cmd", sorted(SMALL))
def test_replay_from_config_is_byte_identical(cmd, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    assert run_cmd(cmd, SMALL[cmd], first) == cli.EXIT_OK
    assert run_cmd(cmd, ["--config", str(first / "config.json")], second) == cli.EXIT_OK
    a, b = artifacts(first), artifacts(second)
    assert set(a) == set(b) and len(a) >= 2
    for name in a:
        assert a[name] == b[name], name


def test_itheta_values(tmp_path, capsys):
    assert run_cmd("itheta", ["--theta", "0", "1000"], tmp_path) == 0
    rows = list(csv.reader((tmp_path / "itheta.csv").open()))
    assert rows[0] == ["theta", "i_theta"]
    assert float(rows[1][1]) == 1.0
    assert float(rows[2][1]) == pytest.approx(0.0019861824904413706, rel=1e-12)
    assert capsys.readouterr().out.strip().startswith("1.0 ")


def test_flags_override_config(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "itheta", "theta": [2.0], "d": 1}))
    assert run_cmd("itheta", ["--config", str(cfg), "--theta", "3"], tmp_path / "o") == 0
    saved = json.loads((tmp_path / "o" / "config.json").read_text())
    assert saved["theta"] == [3.0]
    assert "out" not in saved and "jobs" not in saved


def test_config_for_other_command_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "track"}))
    assert run_cmd("itheta", ["--config", str(cfg)], tmp_path / "o") == cli.EXIT_VALIDATION


def test_unknown_config_key_rejected(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run_cmd("itheta", ["--config", str(cfg)], tmp_path / "o") == cli.EXIT_VALIDATION


def test_validation_exit_codes(tmp_path, capsys):
    assert cli.run(["itheta", "--no-such-flag"]) == cli.EXIT_VALIDATION
    assert run_cmd("itheta", ["--alpha", "0.5"], tmp_path) == cli.EXIT_VALIDATION
    assert run_cmd("itheta", ["--theta", "-1"], tmp_path) == cli.EXIT_VALIDATION
    assert run_cmd("persistence", ["--mode", "other"], tmp_path) == cli.EXIT_VALIDATION
    assert "error" in capsys.readouterr().err


def test_resource_exit_code(tmp_path):
    args = ["--t-end", "2", "--site-budget", "10", "--initial-radius", "8"]
    assert run_cmd("solve", args, tmp_path) == cli.EXIT_RESOURCE


def test_help_lists_flags(capsys):
    assert cli.run(["track", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--t0", "--t1", "--seed", "--config", "--out", "--jobs", "--k-runners"):
        assert flag in text


def test_env_default_output(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    assert cli.run(["nu-mass", "--jobs", "1"]) == 0
    assert (tmp_path / "nu-mass" / "nu_mass.csv").exists()


def test_jobs_do_not_change_artifacts(tmp_path):
    args = SMALL["persistence"]
    assert cli.run(["persistence", *args, "--out", str(tmp_path / "a"), "--jobs", "1"]) == 0
    assert cli.run(["persistence", *args, "--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert artifacts(tmp_path / "a") == artifacts(tmp_path / "b")


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pam_ageing", "nu-mass", "--out", str(tmp_path)],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0
    assert float(proc.stdout.strip()) == nu_region_mass(PRESETS["d1"], 1.0, 1.0, 1.0)
