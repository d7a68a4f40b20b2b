import json
import subprocess
import sys

import pytest

from kmpc.cli import EXIT_CERTIFICATE, EXIT_ERROR, EXIT_OK, FILES, main

SHORT = ["--d", "352", "--steps", "3"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", "--out", str(out), *SHORT]) == EXIT_OK
    return out


def test_run_writes_every_artifact(run_dir):
    for name in [*FILES.values(), "config.json", "trace.csv", "bounds_grid.csv"]:
        assert (run_dir / name).exists(), name
    trace = json.loads((run_dir / "trace.json").read_text())
    assert trace["summary"]["certificate_ok"]
    assert trace["provenance"]["inputs"].keys() == {"model.json", "controller.json", "trace.csv"}


def test_rerun_is_byte_identical(run_dir, tmp_path):
    assert main(["run", "--out", str(tmp_path), *SHORT]) == EXIT_OK
    for name in [*FILES.values(), "trace.csv", "bounds_grid.csv", "config.json"]:
        assert (tmp_path / name).read_bytes() == (run_dir / name).read_bytes(), name


def test_stepwise_commands_match_run(run_dir, tmp_path):
    base = ["--out", str(tmp_path), *SHORT]
    for cmd in ("generate", "identify", "bounds", "terminal", "simulate"):
        assert main([cmd, *base]) == EXIT_OK, cmd
    assert (tmp_path / "trace.csv").read_bytes() == (run_dir / "trace.csv").read_bytes()


def test_verify_accepts_fresh_run(run_dir, capsys):
    assert main(["verify", "--out", str(run_dir)]) == EXIT_OK
    assert "ok   trace.json" in capsys.readouterr().out


def test_changed_config_is_stale(run_dir, capsys):
    assert main(["simulate", "--out", str(run_dir), "--horizon", "3"]) == EXIT_ERROR
    assert "stale pipeline artifact" in capsys.readouterr().err


def test_edited_input_is_stale(run_dir, tmp_path, capsys):
    for name in ("config.json", "dataset.json", "model.json"):
        (tmp_path / name).write_bytes((run_dir / name).read_bytes())
    with open(tmp_path / "dataset.json", "a") as fh:
        fh.write(" ")
    assert main(["bounds", "--out", str(tmp_path)]) == EXIT_ERROR
    assert "stale pipeline artifact" in capsys.readouterr().err
    assert main(["verify", "--out", str(tmp_path)]) == EXIT_ERROR


def test_missing_upstream_artifact(tmp_path, capsys):
    assert main(["identify", "--out", str(tmp_path), "--d", "352"]) == EXIT_ERROR
    assert "missing upstream artifact" in capsys.readouterr().err


def test_infeasible_horizon_is_a_certificate_violation(tmp_path, capsys):
    assert main(["run", "--out", str(tmp_path), *SHORT, "--horizon", "7"]) == EXIT_CERTIFICATE
    err = capsys.readouterr().err
    assert "tightened state set empty" in err
    assert not (tmp_path / "controller.json").exists()


def test_terminal_with_reported_bounds(run_dir, tmp_path, capsys):
    for name in ("config.json", "dataset.json", "model.json", "bounds.json"):
        (tmp_path / name).write_bytes((run_dir / name).read_bytes())
    assert main(["terminal", "--out", str(tmp_path), "--eta", "0.05", "--lbar", "2.27"]) == EXIT_OK
    assert "N_max (box rule) = 4" in capsys.readouterr().out
    ctrl = json.loads((tmp_path / "controller.json").read_text())
    assert ctrl["overrides"] == {"eta": True, "lbar": True}
    assert ctrl["controller"]["eta"] == 0.05


def test_invalid_thread_cap(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("KMPC_THREADS", "many")
    assert main(["reproduce-fig1", "--out", str(tmp_path), "--steps", "1"]) == EXIT_ERROR
    assert "KMPC_THREADS" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"d": 352, "sigmaa": 0.5}))
    assert main(["generate", "--out", str(tmp_path), "--config", str(cfg)]) == EXIT_ERROR
    assert "unknown config keys" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "kmpc.cli", "verify", "--out", str(tmp_path)],
                         capture_output=True, text=True)
    assert res.returncode == EXIT_ERROR
    assert "no pipeline artifacts" in res.stderr
