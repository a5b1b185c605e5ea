"""Command-line front end.

Every subcommand reads an optional YAML config; any scalar key can be
overridden on the command line either as ``--set model.n_sites=10`` or as
``--model.n_sites 10``.  Results go to the output directory (config key
``output.dir``, else ``$ECHOPREP_OUTPUT_DIR``, else ``./echoprep_out``).

Exit status: 0 on success, 2 for an invalid configuration, 3 for a
numerical failure.  Failures also write ``error.json``.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import os
import sys
import traceback
from pathlib import Path

import numpy as np
import yaml

OUTPUT_ENV = "ECHOPREP_OUTPUT_DIR"
SUBCOMMANDS = ("spectrum", "oracle", "landscape", "optimize", "evaluate", "echo-check",
               "noise-bench", "diagnose", "validate")

DEFAULTS = {
    "model": {
        "kind": "ising",
        "n_sites": 8,
        "J0": 1.0,
        "pert_kind": "Z",
        "geometry": "ladder",
        "dims": [4, 2],
        "geometry_file": None,
        "R_b": 1.15,
        "omega0": 1.0,
        "rise_fraction": 0.25,
        "truncation_radius": None,
        "delta_min": -1.0,
        "delta_max": 3.0,
    },
    "target": "auto",
    "protocol": {
        "source": "linear",
        "file": None,
        "T": 6.4,
        "N": 150,
        "s_II": 1 / 3,
        "s_III": 2 / 3,
        "coefficients": [],
    },
    "ensemble": {"sigma": 0.0, "n_samples": 1, "seed": 0},
    "optimizer": {
        "mode": "grape",
        "eta": 1e-3,
        "mu": None,
        "gradient_mode": "first_order",
        "gtol": 1e-8,
        "ftol": 1e-12,
        "max_iter": 1000,
        "T_grid": [],
        "direction": "forward",
        "n_c_max": 5,
        "c1_init": 0.0,
    },
    "spectrum": {"s_min": 0.0, "s_max": 1.0, "n_points": 201, "n_levels": 2, "rabi": "plateau"},
    "oracle": {"eps": 1e-4, "ordered_only": False, "exact": False},
    "landscape": {"n_grid": 41},
    "echo": {"s_c": None},
    "evaluate": {"h_values": [], "sigma_values": [], "n_samples": 7},
    "noise": {
        "sigma": 0.003,
        "tau_c": [],
        "tau_c_over_T": [0.1, 1.0, 10.0, 100.0],
        "n_realizations": 500,
        "protocols": {},
        "delta_f": None,
        "f_max": None,
    },
    "diagnose": {"lambda_min": 0.3, "lambda_max": 0.7, "n_points": 41, "dlam": 0.002, "scaling_data": None},
    "output": {"dir": None},
    "jobs": 1,
}

CHOICES = {
    "model.kind": ("ising", "rydberg"),
    "model.pert_kind": ("Z", "ZZZ", "X", "XX"),
    "model.geometry": ("chain_ring", "square", "ladder", "ring"),
    "protocol.source": ("linear", "file", "piecewise", "goat"),
    "optimizer.mode": ("grape", "continuation", "goat"),
    "optimizer.gradient_mode": ("first_order", "exact_frechet"),
    "optimizer.direction": ("forward", "reverse"),
    "spectrum.rabi": ("plateau", "window"),
    "target": ("auto", "ising_ghz_plus", "rydberg_ghz_plus", "z3_cat", "z4_cat", "ground_state"),
}

NON_NEGATIVE = ("ensemble.sigma", "optimizer.eta", "optimizer.mu", "noise.sigma", "model.truncation_radius")
POSITIVE = ("model.n_sites", "model.J0", "model.R_b", "model.omega0", "protocol.T", "protocol.N",
            "ensemble.n_samples", "spectrum.n_points", "landscape.n_grid", "noise.n_realizations",
            "diagnose.n_points", "diagnose.dlam", "optimizer.gtol", "optimizer.max_iter", "jobs",
            "evaluate.n_samples", "optimizer.n_c_max")


class ConfigError(ValueError):
    def __init__(self, violations):
        super().__init__("; ".join(violations))
        self.violations = list(violations)


# ---------------------------------------------------------------- configuration

def _merge(base: dict, update: dict, path: str, violations: list) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else str(key)
        if key not in base:
            violations.append(f"unknown key '{where}'")
            continue
        if isinstance(base[key], dict) and key != "protocols":
            if not isinstance(value, dict):
                violations.append(f"'{where}' must be a mapping")
                continue
            out[key] = _merge(base[key], value, where, violations)
        else:
            out[key] = value
    return out


def _get(cfg: dict, dotted: str):
    node = cfg
    for part in dotted.split("."):
        node = node[part]
    return node


def _set(cfg: dict, dotted: str, value, violations: list) -> None:
    parts = dotted.split(".")
    node, ref = cfg, DEFAULTS
    for part in parts[:-1]:
        if not isinstance(ref, dict) or part not in ref or not isinstance(ref[part], dict):
            violations.append(f"unknown key '{dotted}'")
            return
        node, ref = node[part], ref[part]
    if parts[-1] not in ref:
        violations.append(f"unknown key '{dotted}'")
        return
    node[parts[-1]] = value


def _numeric(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_types(cfg: dict, ref: dict, path: str, violations: list) -> None:
    for key, default in ref.items():
        where = f"{path}.{key}" if path else key
        value = cfg[key]
        if isinstance(default, dict):
            if key == "protocols":
                if not isinstance(value, dict):
                    violations.append(f"'{where}' must map protocol ids to files")
                continue
            _check_types(value, default, where, violations)
            continue
        if value is None:
            continue
        if isinstance(default, list):
            if not isinstance(value, list):
                violations.append(f"'{where}' must be a list")
        elif _numeric(default) or (default is None and where in NON_NEGATIVE):
            if not _numeric(value) or not np.isfinite(value):
                violations.append(f"'{where}' must be a finite number, got {value!r}")
            elif isinstance(default, int) and not isinstance(default, bool) and int(value) != value:
                violations.append(f"'{where}' must be an integer, got {value!r}")
        elif isinstance(default, str) and not isinstance(value, str):
            violations.append(f"'{where}' must be a string, got {value!r}")


def validate(config: dict) -> list:
    """Every violation found in a (raw or merged) configuration; empty when valid."""
    violations: list = []
    merged = _merge(DEFAULTS, config or {}, "", violations)
    _check_types(merged, DEFAULTS, "", violations)
    if violations:
        return violations
    for key, options in CHOICES.items():
        if _get(merged, key) not in options:
            violations.append(f"'{key}' must be one of {list(options)}, got {_get(merged, key)!r}")
    for key in NON_NEGATIVE:
        v = _get(merged, key)
        if v is not None and v < 0:
            violations.append(f"'{key}' must be non-negative, got {v}")
    for key in POSITIVE:
        v = _get(merged, key)
        if v is not None and not v > 0:
            violations.append(f"'{key}' must be positive, got {v}")
    m = merged["model"]
    if not 0 < m["rise_fraction"] <= 0.5:
        violations.append(f"'model.rise_fraction' must lie in (0, 0.5], got {m['rise_fraction']}")
    if m["n_sites"] < 2:
        violations.append("'model.n_sites' must be at least 2")
    if m["kind"] == "ising" and m["n_sites"] > 20:
        violations.append("'model.n_sites' above 20 exceeds the dense state-vector budget")
    for key in ("protocol.file", "model.geometry_file", "diagnose.scaling_data"):
        path = _get(merged, key)
        if path is not None and not Path(path).exists():
            violations.append(f"'{key}' refers to a missing file: {path}")
    if merged["protocol"]["source"] == "file" and merged["protocol"]["file"] is None:
        violations.append("'protocol.file' is required when protocol.source is 'file'")
    for pid, path in merged["noise"]["protocols"].items():
        if not Path(str(path)).exists():
            violations.append(f"'noise.protocols.{pid}' refers to a missing file: {path}")
    for key in ("evaluate.sigma_values", "noise.tau_c", "noise.tau_c_over_T", "optimizer.T_grid"):
        for v in _get(merged, key):
            if not _numeric(v) or v < 0 or (key != "evaluate.sigma_values" and v == 0):
                violations.append(f"'{key}' entries must be positive numbers, got {v!r}")
    if merged["optimizer"]["mode"] == "continuation" and not merged["optimizer"]["T_grid"]:
        violations.append("'optimizer.T_grid' is required for continuation")
    return violations


def load_config(path: str | None, overrides: list) -> dict:
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file not found: {path}"])
        try:
            raw = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"config file is not valid YAML: {exc}"]) from exc
        if not isinstance(raw, dict):
            raise ConfigError(["config file must contain a mapping"])
    violations: list = []
    merged = _merge(DEFAULTS, raw, "", violations)
    for dotted, text in overrides:
        _set(merged, dotted, yaml.safe_load(text), violations)
    problems = violations + validate(merged)
    if problems:
        raise ConfigError(problems)
    return merged


# ---------------------------------------------------------------- builders

def build_model(cfg: dict):
    from .models import ModelSpec, build_geometry, read_geometry

    m = cfg["model"]
    if m["kind"] == "ising":
        return ModelSpec.ising(int(m["n_sites"]), m["pert_kind"], float(m["J0"]))
    if m["geometry_file"] is not None:
        pos, geometry = read_geometry(m["geometry_file"]), "file"
    else:
        dims = m["dims"] if m["geometry"] in ("square", "ladder") else [m["n_sites"]]
        pos, geometry = build_geometry(m["geometry"], dims), m["geometry"]
    return ModelSpec(
        "rydberg", len(pos), positions=tuple(map(tuple, pos)), R_b=float(m["R_b"]), omega0=float(m["omega0"]),
        rise_fraction=float(m["rise_fraction"]), truncation_radius=m["truncation_radius"],
        delta_min=float(m["delta_min"]), delta_max=float(m["delta_max"]), geometry=geometry,
    )


def build_target_state(cfg: dict, model):
    from .hilbert import build_target

    kind = cfg["target"]
    if kind == "auto":
        kind = "ising_ghz_plus" if model.kind == "ising" else "rydberg_ghz_plus"
    return build_target(kind, model)


def build_protocol(cfg: dict, T: float | None = None):
    from .optimizer import GoatAnsatz
    from .oracle import piecewise_protocol
    from .propagator import ControlProtocol

    p = cfg["protocol"]
    T = float(p["T"]) if T is None else T
    N = int(p["N"])
    if p["source"] == "file":
        proto = ControlProtocol.read(p["file"])
        return proto if T == float(p["T"]) or proto.total_time == T else proto.rescaled(T)
    if p["source"] == "piecewise":
        return piecewise_protocol(T, float(p["s_II"]), float(p["s_III"]), N)
    if p["source"] == "goat":
        return GoatAnsatz(np.array(p["coefficients"], dtype=float), T).protocol(N)
    return ControlProtocol.linear(T, N)


def build_ensemble(cfg: dict, model, sigma: float | None = None, n_samples: int | None = None):
    from .models import sample_disorder

    e = cfg["ensemble"]
    sigma = float(e["sigma"]) if sigma is None else sigma
    n = int(e["n_samples"]) if n_samples is None else n_samples
    if sigma == 0:
        return None
    return sample_disorder(model, sigma, n, int(e["seed"]))


def scan_perturbation(cfg: dict, model):
    from .models import displacement_perturbation, sample_disorder

    if model.kind == "ising":
        return model.perturbation()
    sigma = float(cfg["ensemble"]["sigma"]) or 0.01
    dx = sample_disorder(model, sigma, 1, int(cfg["ensemble"]["seed"])).samples[0]
    return displacement_perturbation(np.asarray(model.positions), dx, model.R_b, sigma, model.omega0,
                                     model.truncation_radius)


def critical_point(cfg: dict, model) -> float:
    if cfg["echo"]["s_c"] is not None:
        return float(cfg["echo"]["s_c"])
    if model.kind == "ising":
        return 0.5
    from .diagnostics import critical_control, critical_window

    d = cfg["diagnose"]
    lam = np.linspace(d["lambda_min"], d["lambda_max"], int(d["n_points"]))
    window, _, _ = critical_window(model, lam, float(d["dlam"]))
    return critical_control(model, window)


def _scan(cfg: dict, model, protocol=None):
    from .oracle import spectral_scan

    sp = cfg["spectrum"]
    lo, hi = float(sp["s_min"]), float(sp["s_max"])
    if protocol is not None:
        lo, hi = min(lo, protocol.values.min()), max(hi, protocol.values.max())
    grid = np.linspace(lo, hi, int(sp["n_points"]))
    return spectral_scan(model, scan_perturbation(cfg, model), grid, int(sp["n_levels"]), sp["rabi"])


# ---------------------------------------------------------------- output helpers

def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.17g}")
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.ndarray):
        return [_fmt(v) for v in x.tolist()]
    if isinstance(x, dict):
        return {k: _fmt(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_fmt(v) for v in x]
    return x


def write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(_fmt(payload), indent=2) + "\n")


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in row])


# ---------------------------------------------------------------- subcommands

def cmd_spectrum(cfg, out: Path) -> dict:
    model = build_model(cfg)
    scan = _scan(cfg, model)
    scan.write_csv(out / "spectrum.csv")
    return {"n_points": scan.s.size, "n_levels": scan.n_levels}


def cmd_oracle(cfg, out: Path) -> dict:
    from .optimizer import sample_infidelities
    from .oracle import firstorder_infidelity

    model = build_model(cfg)
    protocol = build_protocol(cfg)
    scan = _scan(cfg, model, protocol)
    eps = float(cfg["oracle"]["eps"])
    s_c = critical_point(cfg, model) if cfg["oracle"]["ordered_only"] else None
    result = {"eps": eps, "oracle_infidelity": firstorder_infidelity(protocol, scan, eps, s_c=s_c)}
    if cfg["oracle"]["exact"]:
        from .models import DisorderEnsemble

        target = build_target_state(cfg, model)
        base = sample_infidelities(model, protocol, None, target)[0]
        pert = None if model.kind == "ising" else scan_perturbation(cfg, model)
        full = sample_infidelities(model, protocol, DisorderEnsemble.scalar([eps]), target, pert)[0]
        result.update(exact_infidelity=full, unperturbed_infidelity=base)
    write_json(out / "oracle.json", result)
    return result


def cmd_landscape(cfg, out: Path) -> dict:
    from .oracle import landscape

    model = build_model(cfg)
    target = build_target_state(cfg, model)
    n = int(cfg["landscape"]["n_grid"])
    grid = np.linspace(0, 1, n)
    scan = _scan(cfg, model)
    res = landscape(model, float(cfg["protocol"]["T"]), grid, grid, build_ensemble(cfg, model), target,
                    int(cfg["protocol"]["N"]), scan, critical_point(cfg, model), int(cfg["jobs"]))
    res.write_csv(out / "landscape.csv")
    summary = {"argmin": res.argmin(), "intersections": res.intersections, "min_cost": float(res.cost.min())}
    write_json(out / "landscape.json", summary)
    return summary


def _opt_config(cfg, model, target, ensemble, T, initial=None):
    from .optimizer import OptConfig

    o = cfg["optimizer"]
    pert = None if model.kind == "ising" or ensemble is None or ensemble.kind == "displacement" \
        else scan_perturbation(cfg, model)
    return OptConfig(
        model=model, target=target, ensemble=ensemble, n_steps=int(cfg["protocol"]["N"]), total_time=T,
        eta=float(o["eta"]), mu=o["mu"], gradient_mode=o["gradient_mode"], gtol=float(o["gtol"]),
        ftol=float(o["ftol"]), max_iter=int(o["max_iter"]), initial=initial, perturbation=pert,
        jobs=int(cfg["jobs"]),
    )


def cmd_optimize(cfg, out: Path) -> dict:
    from .optimizer import continuation_T, goat_continuation, grape

    model = build_model(cfg)
    target = build_target_state(cfg, model)
    ensemble = build_ensemble(cfg, model)
    o = cfg["optimizer"]
    T = float(cfg["protocol"]["T"])
    if o["mode"] == "grape":
        initial = build_protocol(cfg) if cfg["protocol"]["source"] != "linear" else None
        rep = grape(_opt_config(cfg, model, target, ensemble, T, initial))
        rep.protocol.write(out / "protocol.txt")
        write_json(out / "report.json", rep.to_dict())
        return {"cost": rep.cost, "termination": rep.termination}
    if o["mode"] == "continuation":
        initial = build_protocol(cfg) if cfg["protocol"]["source"] != "linear" else None
        legs = continuation_T(_opt_config(cfg, model, target, ensemble, T), o["T_grid"], o["direction"], initial)
        rows, failures = [], []
        for T_leg, rep in legs:
            if isinstance(rep, Exception):
                failures.append({"T": T_leg, "error": str(rep)})
                continue
            rep.protocol.write(out / f"protocol_T{T_leg:.6g}.txt")
            write_json(out / f"report_T{T_leg:.6g}.json", rep.to_dict())
            rows.append((T_leg, rep.cost, rep.penalized_cost))
        write_rows(out / "cost_vs_T.csv", ["T", "cost", "penalized_cost"], rows)
        if failures:
            write_json(out / "failed_legs.json", failures)
            raise NumericalFailure(f"{len(failures)} continuation legs failed")
        return {"legs": len(rows)}
    legs = goat_continuation(model, ensemble, target, T, int(o["n_c_max"]), float(o["c1_init"]),
                             int(cfg["protocol"]["N"]), o["gradient_mode"], float(o["gtol"]), float(o["ftol"]),
                             int(o["max_iter"]), int(cfg["jobs"]))
    rows = []
    for n_c, rep in legs:
        if isinstance(rep, Exception):
            continue
        rep.protocol.write(out / f"protocol_Nc{n_c}.txt")
        write_json(out / f"report_Nc{n_c}.json", rep.to_dict())
        rows.append((n_c, rep.cost))
    write_rows(out / "goat.csv", ["n_c", "cost"], rows)
    return {"legs": len(rows)}


def cmd_evaluate(cfg, out: Path) -> dict:
    from .models import DisorderEnsemble
    from .optimizer import cost, sample_infidelities

    model = build_model(cfg)
    target = build_target_state(cfg, model)
    protocol = build_protocol(cfg)
    ev = cfg["evaluate"]
    result = {"cost": cost(model, protocol, build_ensemble(cfg, model), target, jobs=int(cfg["jobs"]))}
    if ev["h_values"]:
        if model.kind != "ising":
            raise ConfigError(["'evaluate.h_values' applies to Ising models; use sigma_values for Rydberg"])
        h = np.array(ev["h_values"], dtype=float)
        vals = sample_infidelities(model, protocol, DisorderEnsemble.scalar(h), target, jobs=int(cfg["jobs"]))
        write_rows(out / "evaluate_h.csv", ["h", "infidelity"], zip(h, vals))
    if ev["sigma_values"]:
        rows = []
        for sigma in ev["sigma_values"]:
            ens = build_ensemble(cfg, model, float(sigma), int(ev["n_samples"]))
            rows.append((float(sigma), cost(model, protocol, ens, target, jobs=int(cfg["jobs"]))))
        write_rows(out / "evaluate_sigma.csv", ["sigma", "mean_infidelity"], rows)
    write_json(out / "evaluate.json", result)
    return result


def cmd_echo_check(cfg, out: Path) -> dict:
    from .oracle import echo_conditions

    model = build_model(cfg)
    protocol = build_protocol(cfg)
    scan = _scan(cfg, model, protocol)
    rep = echo_conditions(protocol, scan, critical_point(cfg, model), float(cfg["oracle"]["eps"]))
    write_json(out / "echo.json", rep.to_dict())
    return {"n_crossings": rep.n_crossings, "ordered_segments": len(rep.amplitudes)}


def cmd_noise_bench(cfg, out: Path) -> dict:
    from .noise import NoiseModel, noise_benchmark, write_benchmark_csv
    from .propagator import ControlProtocol

    model = build_model(cfg)
    if model.kind != "ising":
        raise ConfigError(["noise-bench drives the Ising longitudinal field; set model.kind to 'ising'"])
    target = build_target_state(cfg, model)
    nz = cfg["noise"]
    protocols = {str(k): ControlProtocol.read(v) for k, v in nz["protocols"].items()} or {"input": build_protocol(cfg)}
    T = max(p.total_time for p in protocols.values())
    taus = [float(t) for t in nz["tau_c"]] or [float(r) * T for r in nz["tau_c_over_T"]]
    rows = noise_benchmark(model, protocols, taus, int(nz["n_realizations"]), float(nz["sigma"]), target,
                           int(cfg["ensemble"]["seed"]), delta_f=nz["delta_f"], f_max=nz["f_max"],
                           jobs=int(cfg["jobs"]))
    write_benchmark_csv(out / "noise.csv", rows)
    meta = {
        "noise_models": [NoiseModel(t, float(nz["sigma"]), nz["delta_f"], nz["f_max"],
                                    int(cfg["ensemble"]["seed"])).describe(T) for t in taus],
        "static_reference": {r.protocol_id: r.static_reference for r in rows},
        "failed": {f"{r.protocol_id}@{r.tau_c:.6g}": r.n_failed for r in rows if r.n_failed},
    }
    write_json(out / "noise.json", meta)
    return {"rows": len(rows)}


def cmd_diagnose(cfg, out: Path) -> dict:
    from .diagnostics import critical_window, scaling_fit, write_diagnostics_csv

    model = build_model(cfg)
    d = cfg["diagnose"]
    lam = np.linspace(d["lambda_min"], d["lambda_max"], int(d["n_points"]))
    window, dN, chi = critical_window(model, lam, float(d["dlam"]))
    write_diagnostics_csv(out / "diagnostics.csv", lam, dN, chi)
    result = {"window": window.to_dict()}
    if d["scaling_data"] is not None:
        data = np.loadtxt(d["scaling_data"], delimiter=",", skiprows=1, ndmin=2)
        result["scaling"] = scaling_fit(data[:, 0], data[:, 1], data[:, 2]).to_dict()
    write_json(out / "diagnose.json", result)
    return result


COMMANDS = {
    "spectrum": cmd_spectrum,
    "oracle": cmd_oracle,
    "landscape": cmd_landscape,
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "echo-check": cmd_echo_check,
    "noise-bench": cmd_noise_bench,
    "diagnose": cmd_diagnose,
}


class NumericalFailure(RuntimeError):
    pass


def output_dir(cfg: dict) -> Path:
    d = cfg["output"]["dir"] or os.environ.get(OUTPUT_ENV) or "echoprep_out"
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


def run(subcommand: str, cfg: dict) -> tuple[int, dict]:
    """Dispatch one subcommand; returns (exit status, result or error record)."""
    out = output_dir(cfg)
    write_json(out / "config.json", {"subcommand": subcommand, **cfg})
    try:
        result = COMMANDS[subcommand](cfg, out)
    except ConfigError as exc:
        record = {"status": "invalid_config", "subcommand": subcommand, "violations": exc.violations}
        write_json(out / "error.json", record)
        return 2, record
    except Exception as exc:  # numerical failures keep partial artifacts
        record = {"status": "numerical_failure", "subcommand": subcommand, "error": type(exc).__name__,
                  "message": str(exc), "traceback": traceback.format_exc(limit=5)}
        write_json(out / "error.json", record)
        return 3, record
    return 0, {"status": "ok", "subcommand": subcommand, **_fmt(result)}


def _split_overrides(argv: list) -> tuple[list, list, list]:
    """Pull ``--a.b value`` / ``--a.b=value`` pairs out of ``argv``.

    Returns (remaining argv, overrides, problems).
    """
    rest, overrides, bad = [], [], []
    i = 0
    while i < len(argv):
        tok = argv[i]
        key = tok[2:].split("=", 1)[0] if tok.startswith("--") else ""
        if "." not in key:
            rest.append(tok)
            i += 1
            continue
        if "=" in tok:
            overrides.append(tuple(tok[2:].split("=", 1)))
            i += 1
        elif i + 1 < len(argv):
            overrides.append((key, argv[i + 1]))
            i += 2
        else:
            bad.append(f"missing value for {tok}")
            i += 1
    return rest, overrides, bad


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="echoprep", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", help="YAML run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value by dotted key")
        p.add_argument("--jobs", type=int, help="worker processes for sample/grid tasks")
        p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    rest, overrides, bad = _split_overrides(argv)
    args, extra = parser.parse_known_args(rest)
    bad += [f"unrecognized argument {tok!r}" for tok in extra]
    for item in args.set:
        if "=" not in item:
            bad.append(f"--set expects KEY=VALUE, got {item!r}")
            continue
        overrides.append(tuple(item.split("=", 1)))
    if args.jobs is not None:
        overrides.append(("jobs", str(args.jobs)))
    if args.out is not None:
        overrides.append(("output.dir", json.dumps(args.out)))
    try:
        if bad:
            raise ConfigError(bad)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        record = {"status": "invalid_config", "subcommand": args.command, "violations": exc.violations}
        print(json.dumps(record), file=sys.stderr)
        if args.command == "validate":
            print(json.dumps({"violations": exc.violations}))
        return 2
    if args.command == "validate":
        print(json.dumps({"violations": []}))
        return 0
    status, record = run(args.command, cfg)
    print(json.dumps(record), file=sys.stdout if status == 0 else sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
