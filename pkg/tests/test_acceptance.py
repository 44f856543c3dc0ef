"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one PASS/FAIL line; the lines are repeated in the
terminal summary.  Runtimes are single-process wall clock.
"""

import json
import math
import time

import numpy as np
import pytest

from torus_fbsde import checks, cli, fields, flow
from torus_fbsde.navier_stokes import (TGParams, ns_residual, solve_backward_ns, sup_error,
                                       taylor_green_backward)

RESULTS = []


def record(number, name, passed, detail, elapsed, budget):
    on_time = elapsed <= budget
    ok = bool(passed) and on_time
    line = (f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {name:<22} {detail}"
            f"  [{elapsed:.1f}s / {budget:.0f}s]")
    RESULTS.append(line)
    print(line)
    return ok


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0


def test_01_basis_geometry():
    with Timer() as tm:
        r = checks.basis_geometry(k_max=4, alphas=(2, 3, 4), G=32, tol=1e-10)
    v = r["values"]
    assert record(1, "basis geometry", r["pass"],
                  f"max rel err {v['max_rel_error']:.2e} <= 1e-10, norms in "
                  f"[{v['min_norm']:.4f}, {v['max_norm']:.4f}]", tm.elapsed, 1)


def test_02_laplacian_identity():
    with Timer() as tm:
        r = checks.laplacian_identity(n_fields=20, resolution_3d=32, tol=1e-10)
    v = r["values"]
    assert record(2, "laplacian identity", r["pass"],
                  f"2D max defect {v['max_defect_2d']:.2e}, 3D {v['defect_3d']:.2e} <= 1e-10",
                  tm.elapsed, 30)


def test_03_strat_ito():
    with Timer() as tm:
        r = checks.strat_ito(N_max=3, tol=1e-12)
    assert record(3, "ito = stratonovich", r["pass"],
                  f"max correction {r['values']['max']:.2e} <= 1e-12", tm.elapsed, 5)


def _ns_order_levels():
    h = fields.random_divfree(16, 3, np.random.default_rng(0), amplitude=0.1, band=4)
    res = []
    for dt in (0.04, 0.02, 0.01, 0.005):
        traj = solve_backward_ns(h, 0.1, 0.0, 0.4, dt, 16)
        res.append(ns_residual(traj, order=4)[0])
    return res


def test_04_backward_ns_solver():
    with Timer() as tm:
        P = TGParams(1.0, 0.1, 1.0)
        h = taylor_green_backward(P, 1.0, 16)[0]
        traj = solve_backward_ns(h, 0.1, 0.0, 1.0, 1e-3, 16)
        err = max(sup_error(y, taylor_green_backward(P, s, 16)[0], 32)
                  for s, y in zip(traj.times[::10], traj.y[::10]))
        res = _ns_order_levels()
    orders = [math.log2(res[i] / res[i + 1]) for i in range(3)]
    ok = err <= 1e-8 and all(3.5 <= q <= 4.5 for q in orders)
    assert record(4, "backward NS solver", ok,
                  f"TG sup err {err:.2e} <= 1e-8, residual orders "
                  + ", ".join(f"{q:.2f}" for q in orders), tm.elapsed, 60)


def test_05_energy_identities():
    with Timer() as tm:
        r = checks.energy(dt=1e-3, tol_det=1e-8, tol_x=1e-10)
    v = r["values"]
    assert record(5, "energy identities", r["pass"],
                  f"deterministic {v['deterministic_defect']:.2e} <= 1e-8, "
                  f"X norm {v['x_norm_defect']:.2e} <= 1e-10", tm.elapsed, 10)


def test_06_volume_preservation():
    with Timer() as tm:
        levels = [checks.volume(dt=1e-3 * f, fine=f, G=64, paths=100, tol=1e-2)
                  for f in (4, 2, 1)]
    worst = [r["values"]["max_over_paths"] for r in levels]
    ok = levels[-1]["pass"] and worst[0] > worst[1] > worst[2]
    assert record(6, "volume preservation", ok,
                  f"max|detJ-1| at dt=4e-3,2e-3,1e-3: "
                  + ", ".join(f"{w:.2e}" for w in worst) + " (<= 1e-2 at 1e-3)",
                  tm.elapsed, 300)


def test_07_right_translation():
    with Timer() as tm:
        fine_grid = checks.translation(dt=1e-3, G=64, tol=2e-2)
        coarse_grid = checks.translation(dt=1e-3, G=32, tol=2e-2)
    d64, d32 = fine_grid["values"]["defect"], coarse_grid["values"]["defect"]
    ok = fine_grid["pass"] and d64 < d32
    assert record(7, "right translation", ok,
                  f"defect {d64:.2e} <= 2e-2 at G=64 (G=32: {d32:.2e})", tm.elapsed, 120)


def test_08_bsde_residual():
    with Timer() as tm:
        levels = [checks.bsde(T=0.24, dt=1e-3 * f, fine=f, G=32, paths=8, tol=5e-2)
                  for f in (8, 4, 2, 1)]
    dts = np.array([8e-3, 4e-3, 2e-3, 1e-3])
    rms = np.array([math.sqrt(np.mean(np.square(r["values"]["per_path"]))) for r in levels])
    slope = float(np.polyfit(np.log(dts), np.log(rms), 1)[0])
    ok = levels[-1]["pass"] and slope >= 0.4
    assert record(8, "bsde residual", ok,
                  f"max per-path {levels[-1]['values']['max']:.2e} <= 5e-2, order {slope:.2f}"
                  " >= 0.4", tm.elapsed, 120)


def test_09_representation_formula():
    with Timer() as tm:
        r = checks.representation(T=0.5, dt=1e-3, M=2000, G=32, tol=5e-2)
        halving = checks.representation_halving(T=0.5, dt=1e-3, G=8, M=500, replicates=16)
    ok = r["pass"] and halving["pass"]
    assert record(9, "representation formula", ok,
                  f"sup err {r['values']['sup_error']:.2e} <= 5e-2, M->4M error ratio "
                  f"{halving['values']['ratio']:.2f} in [1.6, 2.4]", tm.elapsed, 600)


def test_10_picard(tmp_path):
    with Timer() as tm:
        body, state = checks.picard("taylor-green", amplitude=0.5, T=0.25, M=2000)
        code = cli.main(["--output-dir", str(tmp_path), "picard", "--preset", "large-T"])
    large = json.loads((tmp_path / "picard.json").read_text())["result"]["state"]
    v = body["values"]
    flagged = code == cli.EXIT_TOL and large["status"] == "diverged"
    ok = body["pass"] and flagged
    assert record(10, "picard converse", ok,
                  f"ratios from it. 2 max {max(v['ratios_from_iteration_2']):.3f} <= 0.5, "
                  f"sup err {v['sup_error_max']:.2e} <= 7e-2; large-T {large['status']} "
                  f"(exit {code})", tm.elapsed, 900)


REPRO = [
    ("laplacian", dict(n_fields=4)),
    ("strat", {}),
    ("energy", dict(T=0.1)),
    ("basis", dict(k_max=2)),
    ("bsde", dict(T=0.05, G=8, paths=2)),
    ("volume", dict(T=0.05, G=16, paths=2)),
    ("translation", dict(T=0.05, G=16)),
    ("representation", dict(T=0.05, G=8, M=40)),
    ("halving", dict(T=0.05, G=4, M=10, replicates=2)),
]


def _values(result):
    keep = {k: v for k, v in result.items() if k not in ("run",)}
    return json.dumps(keep, sort_keys=True, default=float)


def test_11_reproducibility(tmp_path):
    with Timer() as tm:
        same = []
        for name, kw in REPRO:
            a = _values(checks.RUNNERS[name](**kw))
            b = _values(checks.RUNNERS[name](**kw))
            same.append(a == b)
        pa = _values(checks.picard("taylor-green", M=10, iters=2, n_t=4, substeps=2)[0])
        pb = _values(checks.picard("taylor-green", M=10, iters=2, n_t=4, substeps=2)[0])
        same.append(pa == pb)
        reports = []
        for d in ("a", "b"):
            out = tmp_path / d
            cli.main(["--output-dir", str(out), "verify", "bsde", "--set", "T=0.05",
                      "--set", "G=8", "--set", "paths=2"])
            reports.append(json.loads((out / "verify_bsde.json").read_text())["result"])
        same.append(json.dumps(reports[0], sort_keys=True) == json.dumps(reports[1], sort_keys=True))
    assert record(11, "reproducibility", all(same),
                  f"{sum(same)}/{len(same)} reruns byte-identical", tm.elapsed, math.inf)
