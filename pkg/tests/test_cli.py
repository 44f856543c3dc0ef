import json

import pytest

from torus_fbsde import checks, cli
from torus_fbsde.navier_stokes import BlowupError


def run(tmp_path, *argv):
    return cli.main(["--output-dir", str(tmp_path), *argv])


def result(tmp_path, name):
    return json.loads((tmp_path / f"{name}.json").read_text())


def test_verify_basis_pass(tmp_path):
    assert run(tmp_path, "verify", "basis") == cli.EXIT_PASS
    rep = result(tmp_path, "verify_basis")
    assert rep["result"]["pass"] is True
    assert rep["result"]["tolerances"]["rel"] == 1e-10
    assert "timestamp" in rep["run"]


def test_tolerance_failure_exit_code(tmp_path):
    assert run(tmp_path, "verify", "basis", "--set", "tol=0") == cli.EXIT_TOL


def test_unknown_check_parameter(tmp_path):
    assert run(tmp_path, "verify", "basis", "--set", "bogus=1") == cli.EXIT_INPUT


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "solve-ns", "T": 0.05, "dt": 0.01, "K_max": 4,
                               "snapshot_every": 2}))
    assert cli.main(["--config", str(cfg), "--output-dir", str(tmp_path), "solve-ns",
                     "--dt", "0.005"]) == 0
    rep = result(tmp_path, "solve_ns")
    assert rep["config"]["dt"] == 0.005 and rep["config"]["T"] == 0.05
    assert (tmp_path / "summary.csv").read_text().startswith("s,l2,grad_l2,energy_defect,residual")
    assert (tmp_path / "trajectory" / "y_000000.json").exists()


def test_config_errors(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"command": "solve-ns", "typo": 1}))
    assert cli.main(["--config", str(cfg)]) == cli.EXIT_INPUT
    cfg.write_text("{not json")
    assert cli.main(["--config", str(cfg)]) == cli.EXIT_INPUT
    cfg.write_text(json.dumps({"command": "simulate"}))
    assert cli.main(["--config", str(cfg), "solve-ns"]) == cli.EXIT_INPUT
    assert cli.main([]) == cli.EXIT_INPUT


def test_input_validation(tmp_path):
    assert run(tmp_path, "solve-ns", "--dt", "-1") == cli.EXIT_INPUT
    assert run(tmp_path, "solve-ns", "--T", "0", "--t", "1") == cli.EXIT_INPUT
    assert run(tmp_path, "simulate", "--nu", "0") == cli.EXIT_INPUT
    assert run(tmp_path, "solve-ns", "--dt", "0.03", "--T", "0.1") == cli.EXIT_INPUT


def test_cfl_is_input_error(tmp_path, capsys):
    assert run(tmp_path, "solve-ns", "--amplitude", "50", "--dt", "0.05") == cli.EXIT_INPUT
    assert "CFLError" in capsys.readouterr().err


def test_blowup_exit_code(tmp_path, monkeypatch):
    def boom(**kw):
        raise BlowupError("coefficient magnitude 1e7")
    monkeypatch.setitem(checks.RUNNERS, "strat", boom)
    assert run(tmp_path, "verify", "strat") == cli.EXIT_BLOWUP


def test_seed_env_and_reproducible_reports(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert cli.main(["--output-dir", str(d), "simulate", "--G", "16", "--paths", "2",
                         "--T", "0.02", "--dt", "0.01"]) == 0
    ra, rb = result(a, "simulate"), result(b, "simulate")
    assert ra["config"]["seed"] == 11
    assert ra["result"] == rb["result"]
    assert (a / "flow_final.csv").read_bytes() == (b / "flow_final.csv").read_bytes()


def test_seed_env_must_be_integer(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "x")
    assert run(tmp_path, "verify", "strat") == cli.EXIT_INPUT


def test_picard_constant_preset(tmp_path):
    assert run(tmp_path, "picard", "--preset", "constant") == 0
    rep = result(tmp_path, "picard")
    assert rep["result"]["state"]["status"] == "converged"
    assert (tmp_path / "picard_history.csv").exists()


def test_report_summarizes(tmp_path, capsys):
    run(tmp_path, "verify", "strat")
    run(tmp_path, "verify", "basis", "--set", "tol=0")
    assert run(tmp_path, "report") == cli.EXIT_TOL
    out = capsys.readouterr().out
    assert "PASS  strat_ito" in out and "FAIL  basis_geometry" in out
    assert run(tmp_path, "report", str(tmp_path / "missing")) == cli.EXIT_INPUT


def test_reports_are_strict_json(tmp_path):
    run(tmp_path, "solve-ns", "--T", "0.02", "--dt", "0.01", "--K-max", "3")
    text = (tmp_path / "solve_ns.json").read_text()
    assert "NaN" not in text and "Infinity" not in text
    json.loads(text, parse_constant=lambda c: pytest.fail(f"non-standard constant {c}"))
