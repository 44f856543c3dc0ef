"""Named verification runs shared by the command line and the acceptance suite.

Every runner takes plain keyword parameters and returns a JSON-ready dict
with raw values, tolerances and a pass flag.  Runs are deterministic given
their ``seed``.
"""

from __future__ import annotations

import math

import numpy as np

from . import fbsde, fields, flow, lattice
from .navier_stokes import (TaylorGreenProvider, TGParams, energy_defect, exact_trajectory,
                            solve_backward_ns, taylor_green_backward)


def calibration_line(spec: lattice.NoiseBasisSpec) -> dict:
    s = lattice.mode_weight_sum(spec.N, spec.alpha, spec.n)
    return {
        "N": spec.N, "alpha": spec.alpha, "nu": spec.nu, "n": spec.n,
        "epsilon": spec.epsilon, "weight_sum": s,
        "line": (f"eps^2/2 * (1 + {(spec.n - 1)}/{spec.n} * {s!r}) = "
                 f"{0.5 * spec.epsilon ** 2 * lattice.calibration_factor(spec.N, spec.alpha, spec.n)!r}"
                 f" (nu = {spec.nu!r})"),
    }


def _result(check: str, values: dict, tolerances: dict, passed: bool, spec=None, **extra) -> dict:
    out = {"check": check, "values": values, "tolerances": tolerances, "pass": bool(passed)}
    if spec is not None:
        out["calibration"] = calibration_line(spec)
    out.update(extra)
    return out


def basis_geometry(k_max: int = 4, alphas=(2, 3, 4), G: int = 32, tol: float = 1e-10) -> dict:
    worst_rel = 0.0
    lo, hi = math.inf, -math.inf
    rows = []
    for alpha in alphas:
        for k in lattice.modes_up_to(k_max, 2):
            for kind in lattice.KINDS:
                bf = lattice.basis_field(k, kind, alpha)
                q = fields.strong_norm_quadrature(bf, alpha, G)
                exact = lattice.basis_norm_alpha(k, alpha)
                rel = abs(q - exact) / exact
                worst_rel = max(worst_rel, rel)
                lo, hi = min(lo, q), max(hi, q)
                rows.append({"k": list(k), "kind": kind, "alpha": alpha, "quadrature": q,
                             "closed_form": exact})
    bound_ok = lo >= 2 * math.pi ** 2 * (1 - tol) and hi <= 4 * math.pi ** 2 * (1 + tol)
    return _result("basis_geometry", {"max_rel_error": worst_rel, "min_norm": lo, "max_norm": hi,
                                      "modes": rows},
                   {"rel": tol, "lower": 2 * math.pi ** 2, "upper": 4 * math.pi ** 2},
                   worst_rel <= tol and bound_ok)


def laplacian_identity(N_values=(0, 1, 2, 3), alphas=(2, 3, 4), n_fields: int = 20,
                       K_field: float = 5, nu: float = 0.1, seed: int = 0,
                       include_3d: bool = True, resolution_3d: int = 32,
                       tol: float = 1e-10) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    rows = []
    for i in range(n_fields):
        N = N_values[i % len(N_values)]
        alpha = alphas[(i // len(N_values)) % len(alphas)]
        spec = lattice.NoiseBasisSpec(N, alpha, nu)
        V = fields.random_divfree(K_field, 3, rng)
        d = fields.laplacian_identity_defect(V, spec)
        worst = max(worst, d)
        rows.append({"N": N, "alpha": alpha, "defect": d})
    values = {"max_defect_2d": worst, "cases": rows}
    passed = worst <= tol
    if include_3d:
        spec3 = lattice.NoiseBasisSpec(1, 3, nu, 3)
        V3 = fields.project_divergence_free(fields.random_vector_field(4, 3, rng))
        d3 = fields.laplacian_identity_defect(V3, spec3, resolution=resolution_3d)
        values["defect_3d"] = d3
        passed = passed and d3 <= tol
    return _result("laplacian_identity", values, {"defect": tol}, passed,
                   lattice.NoiseBasisSpec(N_values[-1], alphas[0], nu))


def strat_ito(N_max: int = 3, alpha: int = 3, nu: float = 0.1, tol: float = 1e-12) -> dict:
    vals = {}
    for N in range(N_max + 1):
        vals[f"n2_N{N}"] = fields.strat_ito_correction(lattice.NoiseBasisSpec(N, alpha, nu))
    vals["n3_N1"] = fields.strat_ito_correction(lattice.NoiseBasisSpec(1, alpha, nu, 3))
    worst = max(vals.values())
    vals["max"] = worst
    return _result("strat_ito", vals, {"correction": tol}, worst <= tol,
                   lattice.NoiseBasisSpec(N_max, alpha, nu))


def energy(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0, T: float = 1.0,
           dt: float = 1e-3, N: int = 1, alpha: int = 3, seed: int = 0,
           tol_det: float = 1e-8, tol_x: float = 1e-10) -> dict:
    params = TGParams(amplitude, nu, T)
    traj = exact_trajectory(params, t, dt, K_max=4, alpha=alpha)
    spec = lattice.NoiseBasisSpec(N, alpha, nu)
    det = energy_defect(traj)
    rng = np.random.default_rng(seed)
    worst_x = 0.0
    for _ in range(5):
        y = fields.random_divfree(6, alpha, rng)
        worst_x = max(worst_x, abs(fbsde.x_norm_sq(y, spec)
                                   - 2 * nu * fields.as_vector_field(y).grad_l2_sq()))
    worst_x = max(worst_x, fbsde.energy_identities(traj, spec).x_norm_defect)
    return _result("energy_identities", {"deterministic_defect": det, "x_norm_defect": worst_x,
                                         "trapezoid_defect": energy_defect(traj, "trapezoid")},
                   {"deterministic": tol_det, "x_norm": tol_x},
                   det <= tol_det and worst_x <= tol_x, spec)


def _tg_setup(nu, amplitude, T, N, alpha):
    params = TGParams(amplitude, nu, T)
    prov = TaylorGreenProvider(params, K_max=2, alpha=alpha)
    spec = lattice.NoiseBasisSpec(N, alpha, nu)
    return params, prov, spec


def bsde(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0, T: float = 0.25,
         dt: float = 1e-3, N: int = 1, alpha: int = 3, G: int = 32, paths: int = 4,
         seed: int = 0, fine: int = 1, tol: float = 5e-2) -> dict:
    _, prov, spec = _tg_setup(nu, amplitude, T, N, alpha)
    drv = flow.BrownianDriver(seed, dt, fine)
    res = []
    for p in range(paths):
        fp = flow.simulate_forward(prov, spec, drv, flow.ParticleGrid.identity(G), t, T, (p,))
        res.append(float(fbsde.bsde_residual(fbsde.build_triple(prov, fp, spec), prov,
                                            prov.terminal)[0]))
    return _result("bsde_residual", {"per_path": res, "max": max(res)}, {"residual": tol},
                   max(res) <= tol, spec, seeds=[seed])


def representation(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0, T: float = 0.5,
                   dt: float = 1e-3, N: int = 1, alpha: int = 3, G: int = 32, M: int = 2000,
                   seed: int = 0, fine: int = 1, tol: float = 5e-2) -> dict:
    _, prov, spec = _tg_setup(nu, amplitude, T, N, alpha)
    r = fbsde.representation_formula(prov.terminal, prov, prov, spec,
                                     flow.BrownianDriver(seed, dt, fine), G, t, T, M,
                                     reference=prov(t))
    return _result("representation_formula", {"sup_error": r.sup_error, "l2_error": r.l2_error,
                                              "max_stderr": float(r.raw.stderr.max())},
                   {"sup_error": tol}, r.sup_error <= tol, spec, seeds=[seed],
                   estimate=r.estimate.to_json())


def volume(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0, T: float = 0.5,
           dt: float = 1e-3, N: int = 1, alpha: int = 3, G: int = 64, paths: int = 100,
           seed: int = 0, fine: int = 1, tol: float = 1e-2, batch: int = 25) -> dict:
    _, prov, spec = _tg_setup(nu, amplitude, T, N, alpha)
    drv = flow.BrownianDriver(seed, dt, fine)
    vals = []
    for b in range(0, paths, batch):
        fp = flow.simulate_forward(prov, spec, drv, flow.ParticleGrid.identity(G), t, T,
                                   range(b, min(paths, b + batch)), record="final")
        vals.extend(float(v) for v in flow.volume_distortion(fp))
    worst = max(vals)
    return _result("volume_distortion", {"mean_over_paths": float(np.mean(vals)),
                                         "max_over_paths": worst, "per_path": vals},
                   {"max": tol}, worst <= tol, spec, seeds=[seed])


def translation(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0, T: float = 0.5,
                dt: float = 1e-3, N: int = 1, alpha: int = 3, G: int = 64, seed: int = 0,
                fine: int = 1, xi_time: float = 0.2, tol: float = 2e-2) -> dict:
    """xi is the time-``xi_time`` map of the deterministic Taylor-Green flow."""
    _, prov, spec = _tg_setup(nu, amplitude, T, N, alpha)
    xi = flow.rk4_characteristics(lambda s: taylor_green_backward(
        TGParams(amplitude, nu, T), s, 2, alpha)[0], fields.uniform_grid(G), 0.0, xi_time,
        xi_time / 20)
    d = flow.right_translation_check(prov, spec, flow.BrownianDriver(seed, dt, fine),
                                     flow.wrap(xi), t, T)
    return _result("right_translation", {"defect": d}, {"defect": tol}, d <= tol, spec,
                   seeds=[seed])




def representation_halving(nu: float = 0.1, amplitude: float = 1.0, t: float = 0.0,
                           T: float = 0.5, dt: float = 1e-3, N: int = 1, alpha: int = 3,
                           G: int = 8, M: int = 500, replicates: int = 16, seed: int = 5,
                           tol: float = 0.2) -> dict:
    """RMS error at ``M`` and ``4M`` paths over disjoint replicate ensembles.

    Each replicate uses ``4M`` consecutive path indices; its four blocks of
    ``M`` give the small-ensemble errors and their pooled mean the large one.
    """
    _, prov, spec = _tg_setup(nu, amplitude, T, N, alpha)
    drv = flow.BrownianDriver(seed, dt)
    ref = prov(t).evaluate(fields.uniform_grid(G).reshape(-1, 2)).reshape(G, G, 2)
    small, large = [], []
    for rep in range(replicates):
        means = [fbsde.feynman_kac_mean(prov.terminal, prov, prov, spec, drv, G, t, T, M,
                                        start_path=(4 * rep + q) * M).mean for q in range(4)]
        small.extend(float(np.sqrt(np.mean((m - ref) ** 2))) for m in means)
        large.append(float(np.sqrt(np.mean((np.mean(means, axis=0) - ref) ** 2))))
    e_small = float(np.sqrt(np.mean(np.square(small))))
    e_large = float(np.sqrt(np.mean(np.square(large))))
    ratio = e_small / e_large
    return _result("representation_halving", {"rms_error_M": e_small, "rms_error_4M": e_large,
                                              "ratio": ratio},
                   {"ratio": [2 * (1 - tol), 2 * (1 + tol)]}, abs(ratio - 2) <= 2 * tol, spec,
                   seeds=[seed], M=M, replicates=replicates)


PICARD_PRESETS = {
    "constant": {"T": 0.25, "M": 50, "iters": 4},
    "taylor-green": {},
    "large-T": {"T": 8.0, "amplitude": 8.0, "nu": 0.02, "M": 200, "iters": 10},
}


def picard(preset: str = "taylor-green", nu: float = 0.1, N: int = 1, alpha: int = 3,
           amplitude: float = 0.5, t: float = 0.0, T: float = 0.25, M: int = 2000, G: int = 8,
           K_max: float = 3, n_t: int = 16, substeps: int = 4, iters: int = 12,
           tol: float = 1e-8, error_tol: float = 7e-2, ratio_tol: float = 0.5,
           seed: int = 0) -> tuple[dict, fbsde.PicardState]:
    """Picard recovery on a constant or Taylor-Green terminal pair.

    The reference is the spectral solver run on the same node spacing.
    Passing means: converged, every successive-difference ratio from the
    second on at most ``ratio_tol``, and sup error at most ``error_tol``.
    """
    spec = lattice.NoiseBasisSpec(N, alpha, nu)
    if preset == "constant":
        h = fields.DivFreeField.constant((0.3, -0.2), K_max, alpha)
        p_prov, reference = None, (lambda s: h)
    elif preset in PICARD_PRESETS:
        tg = TaylorGreenProvider(TGParams(amplitude, nu, T), K_max, alpha)
        h, p_prov = tg.terminal, tg
        # refine the reference step until the solver's CFL bound holds (speed <= 2A)
        dt_ref = (T - t) / (n_t * substeps)
        dt_ref /= max(1, math.ceil(dt_ref * 2 * abs(amplitude) * K_max / 0.5))
        reference = solve_backward_ns(h, nu, t, T, dt_ref, K_max)
    else:
        raise ValueError(f"unknown picard preset {preset!r}")
    state = fbsde.picard_solve(h, p_prov, spec, t, T, int(M), int(iters), int(n_t),
                               int(substeps), int(G), K_max, tol, seed)
    errs = fbsde.picard_errors(state, reference, int(G))
    ratios = [float(r) for r in state.ratios[1:]]
    ok = (state.status == "converged" and float(errs.max()) <= error_tol
          and all(r <= ratio_tol for r in ratios))
    body = _result("picard", {"sup_error_t": float(errs[0]), "sup_error_max": float(errs.max()),
                              "ratios_from_iteration_2": ratios},
                   {"sup_error": error_tol, "ratio": ratio_tol, "tol": tol}, ok, spec,
                   seeds=[seed], state=state.to_json(), preset=preset)
    return body, state


RUNNERS = {
    "laplacian": laplacian_identity,
    "basis": basis_geometry,
    "strat": strat_ito,
    "energy": energy,
    "bsde": bsde,
    "representation": representation,
    "volume": volume,
    "translation": translation,
    "halving": representation_halving,
}
