"""Command-line driver.

Every command reads an optional JSON config (``--config``), applies flag
overrides on top, validates the result and writes a JSON report.  Reports
are byte-identical across reruns with the same seed; the wall-clock
timestamp lives in a separate ``run`` block that callers can ignore.

Exit codes: 0 pass, 2 tolerance failure (including a divergent Picard
run), 3 input error, 4 numerical blow-up.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import checks, fields, flow, lattice
from .navier_stokes import (BlowupError, CFLError, TaylorGreenProvider, TGParams,
                            solve_backward_ns, taylor_green_field, trajectory_summary)

SEED_ENV = "TORUS_FBSDE_SEED"

EXIT_PASS, EXIT_TOL, EXIT_INPUT, EXIT_BLOWUP = 0, 2, 3, 4


class InputError(ValueError):
    pass


COMMON = {"seed": 0, "output_dir": "torus_fbsde_out", "workers": 1}

DEFAULTS = {
    "solve-ns": {"preset": "taylor-green", "nu": 0.1, "amplitude": 1.0, "t": 0.0, "T": 1.0,
                 "dt": 1e-3, "K_max": 16, "alpha": 3, "terminal": None, "snapshot_every": 100,
                 "energy_tol": 1e-8},
    "simulate": {"nu": 0.1, "N": 1, "alpha": 3, "amplitude": 1.0, "t": 0.0, "T": 0.5,
                 "dt": 1e-3, "G": 32, "paths": 1, "epsilon": None},
    "verify": {"which": None},
    "picard": {"preset": "taylor-green", "nu": 0.1, "N": 1, "alpha": 3, "amplitude": 0.5,
               "t": 0.0, "T": 0.25, "M": 2000, "G": 8, "K_max": 3, "n_t": 16, "substeps": 4,
               "iters": 12, "tol": 1e-8, "error_tol": 7e-2, "ratio_tol": 0.5},
    "report": {"input_dir": None},
}

PICARD_PRESETS = checks.PICARD_PRESETS

_MC = {"nu", "amplitude", "t", "T", "dt", "fine", "N", "alpha", "G", "seed", "tol"}

VERIFY_KEYS = {
    "laplacian": {"N_values", "alphas", "n_fields", "K_field", "nu", "seed", "include_3d",
                  "resolution_3d", "tol"},
    "basis": {"k_max", "alphas", "G", "tol"},
    "strat": {"N_max", "alpha", "nu", "tol"},
    "energy": {"nu", "amplitude", "t", "T", "dt", "N", "alpha", "seed", "tol_det", "tol_x"},
    "bsde": _MC | {"paths"},
    "representation": _MC | {"M"},
    "volume": _MC | {"paths"},
    "translation": _MC | {"xi_time"},
    "halving": (_MC - {"fine"}) | {"M", "replicates"},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="torus-fbsde", description=__doc__.split("\n")[0])
    p.add_argument("--config", type=Path, help="JSON config with a 'command' field")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--seed", type=int)
    sub = p.add_subparsers(dest="command")

    def num(sp, *names, typ=float):
        for name in names:
            sp.add_argument(f"--{name.replace('_', '-')}", dest=name, type=typ)

    s = sub.add_parser("solve-ns", help="backward Navier-Stokes solve")
    s.add_argument("--preset", choices=["taylor-green", "zero", "constant", "snapshot"])
    s.add_argument("--terminal", help="terminal field snapshot JSON (preset 'snapshot')")
    num(s, "nu", "amplitude", "t", "T", "dt", "energy_tol")
    num(s, "K_max", "alpha", "snapshot_every", typ=int)

    s = sub.add_parser("simulate", help="forward stochastic flow")
    num(s, "nu", "amplitude", "t", "T", "dt", "epsilon")
    num(s, "N", "alpha", "G", "paths", typ=int)

    s = sub.add_parser("verify", help="run a named check")
    s.add_argument("which", nargs="?", choices=sorted(VERIFY_KEYS))
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a check parameter (JSON value)")

    s = sub.add_parser("picard", help="Picard recovery of y from h and p")
    s.add_argument("--preset", choices=sorted(PICARD_PRESETS))
    num(s, "nu", "amplitude", "t", "T", "tol", "error_tol", "ratio_tol")
    num(s, "N", "alpha", "M", "G", "n_t", "substeps", "iters", typ=int)
    s.add_argument("--K-max", dest="K_max", type=float)

    s = sub.add_parser("report", help="summarize report JSON files in a directory")
    s.add_argument("input_dir", nargs="?")
    return p


def load_config(args: argparse.Namespace) -> dict:
    cfg: dict = {}
    if args.config is not None:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise InputError("config must be a JSON object")
    command = args.command or cfg.get("command")
    if command not in DEFAULTS:
        raise InputError(f"unknown or missing command: {command!r}")
    if args.command and cfg.get("command") not in (None, args.command):
        raise InputError(f"config is for {cfg.get('command')!r}, not {args.command!r}")
    merged = dict(COMMON)
    merged.update(DEFAULTS[command])
    preset = cfg.get("preset") or getattr(args, "preset", None)
    if command == "picard" and preset:
        if preset not in PICARD_PRESETS:
            raise InputError(f"unknown picard preset {preset!r}")
        merged.update(PICARD_PRESETS[preset])
    for key, value in cfg.items():
        if key == "command":
            continue
        if key not in merged and command != "verify":
            raise InputError(f"unknown config key {key!r} for {command}")
        merged[key] = value
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise InputError(f"{SEED_ENV} must be an integer") from exc
    for key, value in vars(args).items():
        if key in ("config", "command", "set") or value is None:
            continue
        merged[key] = value
    if command == "verify":
        for item in getattr(args, "set", []) or []:
            if "=" not in item:
                raise InputError(f"--set expects KEY=VALUE, got {item!r}")
            k, v = item.split("=", 1)
            try:
                merged[k] = json.loads(v)
            except json.JSONDecodeError:
                merged[k] = v
    merged["command"] = command
    _validate(merged)
    return merged


def _validate(cfg: dict) -> None:
    for key in ("nu", "dt", "T", "t", "amplitude", "tol"):
        v = cfg.get(key)
        if v is not None and not (isinstance(v, (int, float)) and math.isfinite(v)):
            raise InputError(f"{key} must be a finite number")
    if cfg.get("dt") is not None and cfg["dt"] <= 0:
        raise InputError("dt must be positive")
    if cfg.get("nu") is not None and cfg["nu"] <= 0 and cfg["command"] != "solve-ns":
        raise InputError("nu must be positive")
    if "T" in cfg and "t" in cfg and cfg.get("T") is not None and cfg["T"] <= cfg["t"]:
        raise InputError("need T > t")
    for key in ("G", "M", "paths", "N", "K_max", "n_t", "substeps", "iters"):
        v = cfg.get(key)
        if v is not None and (not isinstance(v, (int, float)) or v < 0):
            raise InputError(f"{key} must be a nonnegative number")
    if cfg["command"] == "verify":
        which = cfg.get("which")
        if which not in VERIFY_KEYS:
            raise InputError(f"verify needs one of {sorted(VERIFY_KEYS)}")
        extra = set(cfg) - VERIFY_KEYS[which] - set(COMMON) - {"command", "which"}
        if extra:
            raise InputError(f"unknown parameters for verify {which}: {sorted(extra)}")


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _dump(obj) -> str:
    text = json.dumps(obj, default=_json_default)
    return json.dumps(_finite(json.loads(text)), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def write_report(cfg: dict, name: str, body: dict) -> Path:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    report = {"config": cfg, "result": body,
              "run": {"timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat()}}
    if "calibration" not in body:
        try:
            spec = lattice.NoiseBasisSpec(cfg.get("N", 1), cfg.get("alpha", 3), cfg.get("nu", 0.1))
            body = {**body, "calibration": checks.calibration_line(spec)}
        except ValueError:
            body = {**body, "calibration": None}
    path = out / f"{name}.json"
    path.write_text(_dump(report))
    return path


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


# ----------------------------------------------------------------- commands

def cmd_solve_ns(cfg: dict) -> int:
    K = cfg["K_max"]
    alpha = cfg["alpha"]
    preset = cfg["preset"]
    if preset == "taylor-green":
        h = taylor_green_field(-cfg["amplitude"], K, alpha)
    elif preset == "zero":
        h = fields.DivFreeField.zeros(K, alpha)
    elif preset == "constant":
        h = fields.DivFreeField.constant((cfg["amplitude"], 0.0), K, alpha)
    elif preset == "snapshot":
        if not cfg.get("terminal"):
            raise InputError("preset 'snapshot' needs 'terminal'")
        try:
            h = fields.DivFreeField.from_json(json.loads(Path(cfg["terminal"]).read_text()), K)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            raise InputError(f"cannot read terminal snapshot: {exc}") from exc
    else:
        raise InputError(f"unknown preset {preset!r}")
    traj = solve_backward_ns(h, cfg["nu"], cfg["t"], cfg["T"], cfg["dt"], K)
    rows = trajectory_summary(traj)
    out = Path(cfg["output_dir"])
    snap_dir = out / "trajectory"
    snap_dir.mkdir(parents=True, exist_ok=True)
    every = max(int(cfg["snapshot_every"]), 1)
    for i in list(range(0, len(traj.times), every)) + [len(traj.times) - 1]:
        payload = {"s": float(traj.times[i]), "y": traj.y[i].to_json()}
        (snap_dir / f"y_{i:06d}.json").write_text(_dump(payload))
    _write_csv(out / "summary.csv", rows)
    body = {"check": "solve_ns", "values": {"first": rows[0], "last": rows[-1],
                                            "max_energy_defect": max(abs(r["energy_defect"])
                                                                     for r in rows)},
            "tolerances": {"energy_defect": cfg["energy_tol"]}}
    if preset == "taylor-green":
        exact = 2 * math.pi ** 2 * cfg["amplitude"] ** 2 * math.exp(
            -4 * cfg["nu"] * (cfg["T"] - cfg["t"]))
        body["values"]["l2_sq_closed_form"] = exact
        body["values"]["l2_sq_error"] = abs(rows[0]["l2"] ** 2 - exact)
        body["pass"] = body["values"]["l2_sq_error"] <= cfg["energy_tol"]
    else:
        body["pass"] = body["values"]["max_energy_defect"] <= cfg["energy_tol"]
    write_report(cfg, "solve_ns", body)
    return EXIT_PASS if body["pass"] else EXIT_TOL


def cmd_simulate(cfg: dict) -> int:
    spec = lattice.NoiseBasisSpec(cfg["N"], cfg["alpha"], cfg["nu"])
    prov = TaylorGreenProvider(TGParams(cfg["amplitude"], cfg["nu"], cfg["T"]), 2, cfg["alpha"])
    drv = flow.BrownianDriver(cfg["seed"], cfg["dt"])
    fp = flow.simulate_forward(prov, spec, drv, flow.ParticleGrid.identity(cfg["G"]),
                               cfg["t"], cfg["T"], range(int(cfg["paths"])), cfg["epsilon"],
                               record="final")
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "flow_final.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "particle", "theta_1", "theta_2"])
        for p in range(len(fp.paths)):
            for row in fp.snapshot_rows(-1, p):
                w.writerow([p, row[0], repr(row[1]), repr(row[2])])
    vol = flow.volume_distortion(fp) if cfg["G"] >= 16 else None
    body = {"check": "simulate", "manifest": fp.manifest(),
            "calibration": checks.calibration_line(spec),
            "values": {"volume_distortion": None if vol is None else [float(v) for v in vol]},
            "pass": True}
    write_report(cfg, "simulate", body)
    return EXIT_PASS


def cmd_verify(cfg: dict) -> int:
    which = cfg["which"]
    kwargs = {k: v for k, v in cfg.items() if k in VERIFY_KEYS[which]}
    if "seed" in VERIFY_KEYS[which]:
        kwargs["seed"] = cfg["seed"]
    for key in ("alphas", "N_values"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    body = checks.RUNNERS[which](**kwargs)
    write_report(cfg, f"verify_{which}", body)
    return EXIT_PASS if body["pass"] else EXIT_TOL


def cmd_picard(cfg: dict) -> int:
    kwargs = {k: cfg[k] for k in DEFAULTS["picard"] if k in cfg}
    body, state = checks.picard(seed=cfg["seed"], **kwargs)
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "picard_history.csv",
               [{"iteration": i + 1, "sup_difference": float(d)}
                for i, d in enumerate(state.history)])
    write_report(cfg, "picard", body)
    return EXIT_PASS if body["pass"] else EXIT_TOL


def cmd_report(cfg: dict) -> int:
    src = cfg.get("input_dir") or cfg["output_dir"]
    src = Path(src)
    if not src.is_dir():
        raise InputError(f"no such directory: {src}")
    rows = []
    for path in sorted(src.glob("*.json")):
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError:
            continue
        res = data.get("result", {})
        if "check" not in res:
            continue
        rows.append({"file": path.name, "check": res["check"], "pass": bool(res.get("pass"))})
    _write_csv(src / "summary_reports.csv", rows)
    for r in rows:
        print(f"{'PASS' if r['pass'] else 'FAIL'}  {r['check']:<24} {r['file']}")
    return EXIT_PASS if all(r["pass"] for r in rows) else EXIT_TOL


COMMANDS = {"solve-ns": cmd_solve_ns, "simulate": cmd_simulate, "verify": cmd_verify,
            "picard": cmd_picard, "report": cmd_report}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        return COMMANDS[cfg["command"]](cfg)
    except (InputError, CFLError) as exc:
        return _fail(EXIT_INPUT, type(exc).__name__, str(exc))
    except ValueError as exc:
        return _fail(EXIT_INPUT, "ValueError", str(exc))
    except (BlowupError, FloatingPointError) as exc:
        return _fail(EXIT_BLOWUP, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
