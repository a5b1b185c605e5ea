import csv
import json

import numpy as np
import pytest
import yaml

from echoprep.cli import main, validate
from echoprep.propagator import ControlProtocol

SMALL = ["--model.n_sites", "4", "--protocol.N", "30", "--protocol.T", "3.2"]


def run_cli(args, capsys):
    status = main(args)
    captured = capsys.readouterr()
    return status, captured.out, captured.err


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_validate_examples():
    assert validate({}) == []
    bad = validate({"ensemble": {"sigma": -0.1}})
    assert len(bad) == 1 and "ensemble.sigma" in bad[0]
    unknown = validate({"optimizer": {"learning_rate": 1}})
    assert unknown == ["unknown key 'optimizer.learning_rate'"]


def test_validate_reports_every_problem():
    problems = validate({"ensemble": {"sigma": -1}, "protocol": {"N": 0}, "model": {"kind": "heisenberg"}})
    assert len(problems) == 3


def test_validate_subcommand(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text(yaml.safe_dump({"ensemble": {"sigma": -0.5}, "bogus": 1}))
    status, out, _ = run_cli(["validate", str(cfg)], capsys)
    assert status == 2
    violations = json.loads(out)["violations"]
    assert any("bogus" in v for v in violations) and any("ensemble.sigma" in v for v in violations)
    status, out, _ = run_cli(["validate", "--ensemble.sigma", "0.01"], capsys)
    assert status == 0 and json.loads(out) == {"violations": []}


def test_override_forms(tmp_path, capsys):
    out = tmp_path / "o"
    status, _, _ = run_cli(["evaluate", "--set", "model.n_sites=4", "--protocol.N=20", "--protocol.T", "2.0",
                            "--out", str(out)], capsys)
    assert status == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["model"]["n_sites"] == 4 and cfg["protocol"]["N"] == 20 and cfg["protocol"]["T"] == 2.0


def test_unknown_override_is_rejected(capsys):
    status, _, err = run_cli(["evaluate", "--model.colour", "red"], capsys)
    assert status == 2 and "model.colour" in err


def test_output_directory_from_environment(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("ECHOPREP_OUTPUT_DIR", str(tmp_path / "env"))
    assert run_cli(["evaluate", *SMALL], capsys)[0] == 0
    assert (tmp_path / "env" / "evaluate.json").exists()


def test_optimize_continuation_writes_legs(tmp_path, capsys):
    out = tmp_path / "opt"
    status, _, _ = run_cli(["optimize", *SMALL, "--optimizer.mode", "continuation", "--optimizer.T_grid", "[2.0, 3.0]",
                            "--optimizer.max_iter", "15", "--out", str(out)], capsys)
    assert status == 0
    rows = read_csv(out / "cost_vs_T.csv")
    assert rows[0] == ["T", "cost", "penalized_cost"] and len(rows) == 3
    assert (out / "protocol_T2.txt").exists() and (out / "protocol_T3.txt").exists()


def test_optimize_then_evaluate_round_trip(tmp_path, capsys):
    opt = tmp_path / "opt"
    assert run_cli(["optimize", *SMALL, "--optimizer.max_iter", "10", "--out", str(opt)], capsys)[0] == 0
    report = json.loads((opt / "report.json").read_text())
    ev = tmp_path / "ev"
    status, out, _ = run_cli(["evaluate", *SMALL, "--protocol.source", "file",
                              "--protocol.file", str(opt / "protocol.txt"), "--out", str(ev)], capsys)
    assert status == 0
    assert json.loads((ev / "evaluate.json").read_text())["cost"] == pytest.approx(report["cost"], abs=1e-12)


def test_evaluate_field_sweep(tmp_path, capsys):
    out = tmp_path / "ev"
    status, _, _ = run_cli(["evaluate", *SMALL, "--evaluate.h_values", "[-0.01, 0.0, 0.01]",
                            "--evaluate.sigma_values", "[0.0, 0.01]", "--out", str(out)], capsys)
    assert status == 0
    rows = read_csv(out / "evaluate_h.csv")
    assert rows[0] == ["h", "infidelity"]
    vals = [float(r[1]) for r in rows[1:]]
    assert vals[0] == pytest.approx(vals[2], abs=1e-14) and vals[1] <= vals[0]
    assert len(read_csv(out / "evaluate_sigma.csv")) == 3


def test_outputs_do_not_depend_on_jobs(tmp_path, capsys):
    outs = []
    for jobs in (1, 2):
        out = tmp_path / f"j{jobs}"
        args = ["evaluate", *SMALL, "--ensemble.sigma", "0.01", "--ensemble.n_samples", "4",
                "--evaluate.h_values", "[0.001, 0.002, 0.003]", "--jobs", str(jobs), "--out", str(out)]
        assert run_cli(args, capsys)[0] == 0
        outs.append(((out / "evaluate.json").read_text(), (out / "evaluate_h.csv").read_text()))
    assert outs[0] == outs[1]


def test_echo_check_on_linear_ramp(tmp_path, capsys):
    out = tmp_path / "echo"
    status, stdout, _ = run_cli(["echo-check", *SMALL, "--spectrum.n_points", "21", "--out", str(out)], capsys)
    assert status == 0
    rep = json.loads((out / "echo.json").read_text())
    assert len(rep["amplitudes"]) == 1 and rep["phases"] == []
    assert json.loads(stdout)["n_crossings"] == 1


def test_spectrum_and_oracle(tmp_path, capsys):
    out = tmp_path / "spec"
    assert run_cli(["spectrum", *SMALL, "--spectrum.n_points", "11", "--out", str(out)], capsys)[0] == 0
    assert len(read_csv(out / "spectrum.csv")) == 12
    status, _, _ = run_cli(["oracle", *SMALL, "--spectrum.n_points", "21", "--oracle.exact", "true",
                            "--out", str(out)], capsys)
    assert status == 0
    res = json.loads((out / "oracle.json").read_text())
    assert res["oracle_infidelity"] > 0 and res["exact_infidelity"] >= res["unperturbed_infidelity"]


def test_landscape_small(tmp_path, capsys):
    out = tmp_path / "land"
    status, _, _ = run_cli(["landscape", *SMALL, "--landscape.n_grid", "3", "--spectrum.n_points", "11",
                            "--out", str(out)], capsys)
    assert status == 0
    assert len(read_csv(out / "landscape.csv")) == 10
    assert "argmin" in json.loads((out / "landscape.json").read_text())


def test_noise_bench_small(tmp_path, capsys):
    proto = tmp_path / "lin.txt"
    ControlProtocol.linear(3.2, 30).write(proto)
    out = tmp_path / "noise"
    status, _, _ = run_cli(["noise-bench", *SMALL, "--noise.n_realizations", "3", "--noise.tau_c_over_T", "[1.0]",
                            "--set", f"noise.protocols={{lin: {proto}}}", "--out", str(out)], capsys)
    assert status == 0
    rows = read_csv(out / "noise.csv")
    assert rows[1][1] == "lin" and int(rows[1][4]) == 3


def test_diagnose_and_numerical_failure(tmp_path, capsys):
    out = tmp_path / "diag"
    status, _, _ = run_cli(["diagnose", "--model.n_sites", "6", "--diagnose.n_points", "9", "--out", str(out)], capsys)
    assert status == 0
    window = json.loads((out / "diagnose.json").read_text())["window"]
    assert 0.3 < window["lambda_lo"] <= window["lambda_hi"] < 0.7
    bad = tmp_path / "bad"
    status, _, err = run_cli(["diagnose", "--model.n_sites", "6", "--diagnose.lambda_min", "0.6",
                              "--diagnose.lambda_max", "0.9", "--diagnose.n_points", "5", "--out", str(bad)], capsys)
    assert status == 3
    record = json.loads((bad / "error.json").read_text())
    assert record["status"] == "numerical_failure" and record["error"] == "WindowError"


def test_missing_protocol_file(tmp_path, capsys):
    status, _, err = run_cli(["evaluate", "--protocol.source", "file", "--protocol.file",
                              str(tmp_path / "nope.txt")], capsys)
    assert status == 2 and "missing file" in err


def test_floats_are_written_with_full_precision(tmp_path, capsys):
    out = tmp_path / "ev"
    run_cli(["evaluate", *SMALL, "--out", str(out)], capsys)
    text = (out / "evaluate.json").read_text()
    value = json.loads(text)["cost"]
    assert float(f"{value:.17g}") == value
    assert np.isfinite(value)
