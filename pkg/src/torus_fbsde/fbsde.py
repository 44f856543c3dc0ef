"""Backward half of the forward-backward system.

Along a flow ``Z`` driven by ``y``, the pair ``Y_s = y(s, Z_s)`` and
``X^j_s = eps (F_j . grad) y(s, Z_s)`` (one entry per noise field ``F_j``)
solves

    Y_s = h(Z_T) + int_s^T grad p(r, Z_r) dr - sum_j int_s^T X^j_r dW^j_r.

This module checks that identity pathwise, estimates ``y(t)`` as the mean
of ``h(Z_T) + int grad p(Z) dr`` over independent flows, and recovers ``y``
from ``h`` and ``p`` alone by Picard iteration on short horizons.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import (DivFreeField, ScalarField, VectorField, as_vector_field,
                     basis_directional_derivative, leray_project, uniform_grid)
from .flow import (BrownianDriver, FlowPath, ParticleGrid, as_provider, simulate_forward,
                   step_count)
from .lattice import NoiseBasisSpec
from .navier_stokes import NSTrajectory, energy_defect


def as_pressure_provider(p) -> Callable[[float], ScalarField]:
    """Accept a ScalarField, a trajectory / provider with ``.pressure`` or a callable."""
    if p is None:
        zero = ScalarField.zeros(0, 2)
        return lambda s: zero
    if isinstance(p, ScalarField):
        return lambda s: p
    if hasattr(p, "pressure"):
        return p.pressure
    return p


class _GradientCache:
    """``grad p(s)`` as a VectorField, reused across calls at the same time."""

    def __init__(self, p_provider):
        self.provider = as_pressure_provider(p_provider)
        self._key = None
        self._value = None

    def __call__(self, s: float) -> VectorField:
        if self._key != s:
            self._key = s
            self._value = self.provider(s).gradient()
        return self._value


def _eval(field, Z: np.ndarray, cache=None) -> np.ndarray:
    n = Z.shape[-1]
    return field.evaluate(Z.reshape(-1, n), cache).reshape(Z.shape)


# ---------------------------------------------------------------- triples

@dataclass(frozen=True, eq=False)
class BSDETriple:
    """``Z`` (flow), ``Y`` and ``X`` sampled on the particle grid.

    Shapes: ``Y`` is (n_times, P, G, G, 2); ``X`` is (n_times, n_noise, P, G, G, 2).
    """

    path: FlowPath
    Y: np.ndarray
    X: np.ndarray
    epsilon: float

    @property
    def n_noise(self) -> int:
        return self.X.shape[1]


def _check_full_record(path: FlowPath):
    n_steps = path.meta.get("n_steps", len(path.times) - 1)
    if path.record_stride != 1 or len(path.times) != n_steps + 1:
        raise ValueError("path must be recorded at every step")


def lift_Y(y_provider, path: FlowPath) -> np.ndarray:
    """``Y_s = y(s, Z_s)`` at every recorded time."""
    provider = as_provider(y_provider)
    return np.stack([_eval(provider(s), path.Z[i]) for i, s in enumerate(path.times)])


def compute_X(y_provider, path: FlowPath, spec: NoiseBasisSpec,
              epsilon: float | None = None) -> np.ndarray:
    """``X^j_s = eps (F_j . grad) y(s, .) (Z_s)``, one entry per noise field."""
    provider = as_provider(y_provider)
    eps = spec.epsilon if epsilon is None else epsilon
    fields = spec.fields()
    out = np.empty((len(path.times), len(fields)) + path.Z.shape[1:])
    for i, s in enumerate(path.times):
        y = as_vector_field(provider(s))
        for j, bf in enumerate(fields):
            out[i, j] = eps * _eval(basis_directional_derivative(bf, y), path.Z[i])
    return out


def build_triple(y_provider, path: FlowPath, spec: NoiseBasisSpec) -> BSDETriple:
    _check_full_record(path)
    return BSDETriple(path, lift_Y(y_provider, path),
                      compute_X(y_provider, path, spec, path.epsilon), path.epsilon)


def _increment_weights(dW: np.ndarray, ndim: int) -> np.ndarray:
    """(P, n_steps, n_noise) increments reshaped to broadcast against X[:-1]."""
    w = np.transpose(dW, (1, 2, 0))
    return w.reshape(w.shape + (1,) * (ndim - 3))


def stochastic_integral(triple: BSDETriple) -> np.ndarray:
    """Left-point sums ``sum_j sum_r X^j_r dW^j_r`` over the whole horizon, per path."""
    dW = triple.path.increments          # (P, n_steps, n_noise)
    X = triple.X[:-1]                    # (n_steps, n_noise, P, ...)
    return (X * _increment_weights(dW, X.ndim)).sum(axis=(0, 1))


def bsde_residual(triple: BSDETriple, p_provider, h) -> np.ndarray:
    """Per-path ``max_{s, grid} |R_s|`` with

    ``R_s = Y_s - h(Z_T) - int_s^T grad p(Z_r) dr + sum_{r >= s} X_r dW_r``

    using the trapezoid rule in ``r`` and left-point stochastic sums.
    """
    path = triple.path
    _check_full_record(path)
    grad = _GradientCache(p_provider)
    times = path.times
    n = len(times)
    gp = np.stack([_eval(grad(s), path.Z[i]) for i, s in enumerate(times)])
    dt = np.diff(times).reshape((-1,) + (1,) * (gp.ndim - 1))
    trap = 0.5 * (gp[1:] + gp[:-1]) * dt
    dW = path.increments
    ito = (triple.X[:-1] * _increment_weights(dW, triple.X.ndim)).sum(axis=1)  # (n_steps, P, ...)
    # tails from s_i to T, accumulated backward
    tail_p = np.zeros_like(gp)
    tail_w = np.zeros_like(gp)
    tail_p[:-1] = np.cumsum(trap[::-1], axis=0)[::-1]
    tail_w[:-1] = np.cumsum(ito[::-1], axis=0)[::-1]
    hT = _eval(h, path.Z[-1])
    R = triple.Y - hT[None] - tail_p + tail_w
    norms = np.linalg.norm(R, axis=-1)              # (n, P, G, G)
    return norms.reshape(n, norms.shape[1], -1).max(axis=(0, 2))


# ------------------------------------------------------------ energy checks

@dataclass(frozen=True)
class EnergyDefects:
    deterministic_defect: float
    x_norm_defect: float


def x_norm_sq(y, spec: NoiseBasisSpec) -> float:
    """``sum_j ||eps (F_j . grad) y||^2`` computed spectrally."""
    v = as_vector_field(y)
    total = 0.0
    for bf in spec.fields():
        total += basis_directional_derivative(bf, v).l2_sq()
    return spec.epsilon ** 2 * total


def energy_identities(y_traj: NSTrajectory, spec: NoiseBasisSpec,
                      rule: str = "simpson") -> EnergyDefects:
    """Energy balance of the backward solution and ``||X||^2 = 2 nu ||grad y||^2``.

    The second identity uses ``spec.nu``; ``y_traj.nu`` drives the first.
    """
    det = energy_defect(y_traj, rule)
    worst = 0.0
    for y in y_traj.y:
        v = as_vector_field(y)
        worst = max(worst, abs(x_norm_sq(v, spec) - 2.0 * spec.nu * v.grad_l2_sq()))
    return EnergyDefects(det, worst)


def sampled_x_norm_sq(X: np.ndarray) -> np.ndarray:
    """Grid quadrature of ``||X_s||^2`` from samples (n_noise, P, G, G, 2), per path."""
    G = X.shape[-2]
    h2 = (2.0 * math.pi / G) ** 2
    return (X ** 2).sum(axis=(0, -1)).reshape(X.shape[1], -1).sum(axis=1) * h2


# --------------------------------------------------- Monte Carlo estimation

@dataclass(frozen=True, eq=False)
class GridEstimate:
    """Pathwise mean and standard error of a grid functional."""

    mean: np.ndarray          # (G, G, n)
    stderr: np.ndarray        # (G, G, n)
    M: int


def feynman_kac_mean(h, p_provider, y_provider, spec: NoiseBasisSpec, driver: BrownianDriver,
                     G: int, t: float, T: float, M: int, start_path: int = 0,
                     batch: int = 250, epsilon: float | None = None) -> GridEstimate:
    """Mean over ``M`` flows from the identity at ``t`` of
    ``h(Z_T) + int_t^T grad p(r, Z_r) dr`` (trapezoid in ``r``)."""
    if M < 1:
        raise ValueError("need at least one path")
    grad = _GradientCache(p_provider)
    n_steps = step_count(t, T, driver.dt)
    dt = driver.dt
    total = np.zeros((G, G, 2))
    total_sq = np.zeros((G, G, 2))
    start = ParticleGrid.identity(G)
    for b0 in range(0, M, batch):
        paths = range(start_path + b0, start_path + min(M, b0 + batch))
        acc = np.zeros((len(paths), G, G, 2))
        final_cache = [None]

        def observe(i, s, Z, cache, acc=acc):
            if n_steps == 0:
                return
            final_cache[0] = cache
            weight = 0.5 * dt if i in (0, n_steps) else dt
            acc += weight * _eval(grad(s), Z, cache)

        fp = simulate_forward(y_provider, spec, driver, start, t, T, paths, epsilon,
                              record="final", observer=observe)
        acc += _eval(h, fp.final, final_cache[0])
        total += acc.sum(axis=0)
        total_sq += (acc ** 2).sum(axis=0)
    mean = total / M
    var = np.maximum(total_sq / M - mean ** 2, 0.0) * (M / max(M - 1, 1))
    return GridEstimate(mean, np.sqrt(var / M), M)


def grid_to_divfree(values: np.ndarray, alpha: int, K_max: float | None = None) -> DivFreeField:
    """Leray projection of grid samples (G, G, 2) onto a DivFreeField."""
    G = values.shape[0]
    K = (G - 1) // 2
    vf = VectorField.from_grid(np.moveaxis(values, -1, 0), K)
    return leray_project(vf, alpha, K_max)


@dataclass(frozen=True, eq=False)
class RepresentationResult:
    estimate: DivFreeField
    raw: GridEstimate
    sup_error: float | None = None
    l2_error: float | None = None


def field_errors(a, b, G: int) -> tuple[float, float]:
    """(sup over the G-grid, L2) distance between two fields."""
    pts = uniform_grid(G, 2).reshape(-1, 2)
    sup = float(np.max(np.linalg.norm(a.evaluate(pts) - b.evaluate(pts), axis=-1)))
    l2 = math.sqrt((as_vector_field(a) - as_vector_field(b)).l2_sq())
    return sup, l2


def representation_formula(h, p_provider, y_provider, spec: NoiseBasisSpec,
                           driver: BrownianDriver, G: int, t: float, T: float, M: int,
                           reference=None, K_max: float | None = None, start_path: int = 0,
                           batch: int = 250, epsilon: float | None = None) -> RepresentationResult:
    """Monte Carlo estimate of ``y(t)`` from flows driven by ``y_provider``."""
    raw = feynman_kac_mean(h, p_provider, y_provider, spec, driver, G, t, T, M, start_path,
                           batch, epsilon)
    alpha = getattr(h, "alpha", spec.alpha)
    est = grid_to_divfree(raw.mean, alpha, K_max)
    if reference is None:
        return RepresentationResult(est, raw)
    sup, l2 = field_errors(est, reference, G)
    return RepresentationResult(est, raw, sup, l2)


# ---------------------------------------------------------------- Picard

class NodeProvider:
    """Piecewise-linear-in-time field built from values at ``nodes``."""

    def __init__(self, nodes: np.ndarray, fields: Sequence[DivFreeField]):
        self.nodes = np.asarray(nodes, dtype=float)
        self.fields = list(fields)

    def __call__(self, s: float) -> DivFreeField:
        nodes = self.nodes
        j = int(np.searchsorted(nodes, s, side="right") - 1)
        j = min(max(j, 0), len(nodes) - 2)
        w = (s - nodes[j]) / (nodes[j + 1] - nodes[j])
        if w <= 0.0:
            return self.fields[j]
        if w >= 1.0:
            return self.fields[j + 1]
        return self.fields[j] * (1.0 - w) + self.fields[j + 1] * w

    at = __call__


@dataclass(eq=False)
class PicardState:
    """Iterates on the node grid and the successive sup-difference history."""

    nodes: np.ndarray
    y: list
    iterate: int = 0
    history: list = field(default_factory=list)
    status: str = "running"
    converged_at: int | None = None
    reason: str = ""

    @property
    def ratios(self) -> list[float]:
        hist = self.history
        return [hist[i] / hist[i - 1] if hist[i - 1] > 0 else math.inf
                for i in range(1, len(hist))]

    @property
    def diverged(self) -> bool:
        return self.status == "diverged"

    def provider(self) -> NodeProvider:
        return NodeProvider(self.nodes, self.y)

    def to_json(self) -> dict:
        return {"iterate": self.iterate, "status": self.status,
                "converged_at": self.converged_at, "reason": self.reason,
                "history": [float(x) for x in self.history],
                "ratios": [float(x) for x in self.ratios],
                "nodes": [float(x) for x in self.nodes]}


def _divergence_reason(history: Sequence[float], run: int = 3) -> str:
    if not all(math.isfinite(x) for x in history):
        return "non-finite iterate"
    if len(history) > run and all(history[-i] > history[-i - 1] for i in range(1, run + 1)):
        return f"sup-difference grew {run} iterations running"
    if len(history) >= run + 1:
        r = [history[-i] / history[-i - 1] for i in range(1, run + 1) if history[-i - 1] > 0]
        if len(r) == run and math.exp(sum(math.log(max(x, 1e-300)) for x in r) / run) >= 1.0:
            return f"no contraction over the last {run} iterations"
    return ""


def picard_solve(h: DivFreeField, p_provider, spec: NoiseBasisSpec, t: float, T: float,
                 M: int, iters: int = 12, n_t: int = 16, substeps: int = 4, G: int = 8,
                 K_max: float = 3, tol: float = 1e-8, seed: int = 0,
                 y0: Sequence[DivFreeField] | None = None, epsilon: float | None = None,
                 batch: int = 500, callback=None) -> PicardState:
    """Fixed-point iteration ``y <- Leray(mean[h(Z_T) + int grad p(Z) dr])``.

    At every node ``s_j`` of a uniform grid of ``n_t`` intervals the flow
    driven by the current iterate restarts from the identity.  Node ``j``
    always draws from the Brownian stream ``(seed, j)``, so successive
    iterates see the same noise and their differences measure the
    contraction of the map rather than Monte Carlo scatter.
    """
    if not T > t:
        raise ValueError("need T > t")
    if M < 1:
        raise ValueError("need M >= 1")
    nodes = np.linspace(t, T, n_t + 1)
    dt = (T - t) / (n_t * substeps)
    alpha = h.alpha
    zero = DivFreeField.zeros(K_max, alpha)
    current = list(y0) if y0 is not None else [zero] * (n_t + 1)
    state = PicardState(nodes, current)
    pts = uniform_grid(G, 2).reshape(-1, 2)
    values = np.stack([f.evaluate(pts) for f in current])
    for m in range(1, iters + 1):
        provider = NodeProvider(nodes, current)
        new = []
        for j, s in enumerate(nodes):
            drv = BrownianDriver(seed, dt, stream=(j,))
            raw = feynman_kac_mean(h, p_provider, provider, spec, drv, G, float(s), T, M,
                                   batch=batch, epsilon=epsilon)
            new.append(grid_to_divfree(raw.mean, alpha, K_max))
        new_values = np.stack([f.evaluate(pts) for f in new])
        diff = float(np.max(np.linalg.norm(new_values - values, axis=-1)))
        state.history.append(diff)
        state.iterate = m
        current, values = new, new_values
        state.y = current
        if callback is not None:
            callback(state)
        if diff < tol:
            state.status = "converged"
            state.converged_at = m - 1
            break
        reason = _divergence_reason(state.history)
        if reason:
            state.status = "diverged"
            state.reason = reason
            break
    else:
        state.status = "max_iter"
    return state


def picard_errors(state: PicardState, reference, G: int = 8) -> np.ndarray:
    """Sup error of the iterate against ``reference(s)`` at every node."""
    ref = as_provider(reference)
    return np.array([field_errors(y, ref(float(s)), G)[0] for s, y in zip(state.nodes, state.y)])
