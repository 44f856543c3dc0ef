"""Backward Navier-Stokes on the 2-torus.

The backward system ``d_s y = -(y.grad)y - nu Lap y - grad p`` with terminal
value ``y(T) = h`` is solved through ``y(s) = -u(T - s)``, where ``u`` solves
the ordinary forward equations from ``u(0) = -h``.  The forward solve is a
pseudo-spectral integrating-factor RK4 on a disk of wavenumbers
``|k| <= K_max`` with a grid that keeps quadratic products alias-free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
import numpy as np
from scipy.integrate import cumulative_simpson

from .fields import (DivFreeField, ScalarField, VectorField, advect, as_vector_field,
                     leray_project, uniform_grid)


class CFLError(RuntimeError):
    """Time step too large for the current velocity and resolution."""


class BlowupError(RuntimeError):
    """A Fourier coefficient left the admissible range."""


BLOWUP_BOUND = 1e6


@dataclass(frozen=True)
class TGParams:
    """Taylor-Green amplitude, viscosity and terminal time."""

    amplitude: float
    nu: float
    T: float

    def __post_init__(self):
        if not math.isfinite(self.amplitude):
            raise ValueError("amplitude must be finite")
        if self.nu < 0:
            raise ValueError("nu must be nonnegative")


def taylor_green_field(amplitude: float = 1.0, K_max: float = 16, alpha: int = 3) -> DivFreeField:
    """``amplitude * (sin t1 cos t2, -cos t1 sin t2)`` in the cos/sin basis.

    The field is ``(1/2) sin(t1+t2) (1,-1) + (1/2) sin(t1-t2) (1,1)``, i.e. a
    combination of the B fields of modes (1,1) and (1,-1).
    """
    c = 0.5 * amplitude * 2.0 ** ((alpha + 1) / 2.0)
    return DivFreeField.from_modes({(1, 1): (0.0, c), (1, -1): (0.0, -c)}, K_max, alpha)


def taylor_green_pressure(amplitude: float = 1.0) -> ScalarField:
    """``(amplitude^2 / 4)(cos 2 t1 + cos 2 t2)``, the pressure that balances
    ``(U.grad)U`` for the Taylor-Green field ``U`` of that amplitude."""
    hat = np.zeros((5, 5), dtype=complex)
    q = amplitude ** 2 / 8.0
    for a, b in ((4, 2), (0, 2), (2, 4), (2, 0)):
        hat[a, b] = q
    return ScalarField(hat, 2)


def taylor_green_backward(params: TGParams, s: float, K_max: float = 16,
                          alpha: int = 3) -> tuple[DivFreeField, ScalarField]:
    """Exact backward pair at time ``s`` with terminal time ``params.T``."""
    decay = math.exp(-2.0 * params.nu * (params.T - s))
    y = taylor_green_field(-params.amplitude * decay, K_max, alpha)
    p = taylor_green_pressure(params.amplitude * decay)
    return y, p


class TaylorGreenProvider:
    """Callable ``s -> y(s)`` (and ``.pressure(s)``) for the exact pair."""

    def __init__(self, params: TGParams, K_max: float = 16, alpha: int = 3):
        self.params = params
        self.K_max = K_max
        self.alpha = alpha

    def __call__(self, s: float) -> DivFreeField:
        return taylor_green_backward(self.params, s, self.K_max, self.alpha)[0]

    def pressure(self, s: float) -> ScalarField:
        return taylor_green_pressure(self.params.amplitude
                                     * math.exp(-2.0 * self.params.nu * (self.params.T - s)))

    @property
    def terminal(self) -> DivFreeField:
        return self(self.params.T)


def pressure_from_velocity(u) -> ScalarField:
    """Zero-mean ``p`` with ``Lap p = -div((u.grad)u)``, computed exactly."""
    v = as_vector_field(u)
    f = advect(v, v)
    g = f.divergence()
    K = g.K
    k1 = np.arange(-K, K + 1)[:, None]
    k2 = np.arange(-K, K + 1)[None, :]
    ksq = (k1 ** 2 + k2 ** 2).astype(float)
    ksq[K, K] = 1.0
    hat = g.hat / ksq
    hat[K, K] = 0.0
    return ScalarField(hat, 2)


@dataclass(frozen=True, eq=False)
class NSTrajectory:
    """Backward solution sampled at ``times`` (increasing, last = T)."""

    times: np.ndarray
    y: list
    p: list
    nu: float
    meta: dict = field(default_factory=dict)

    @property
    def t(self) -> float:
        return float(self.times[0])

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def terminal(self) -> DivFreeField:
        return self.y[-1]

    def _locate(self, s: float) -> tuple[int, float]:
        times = self.times
        if s < times[0] - 1e-12 or s > times[-1] + 1e-12:
            raise ValueError(f"time {s} outside [{times[0]}, {times[-1]}]")
        j = int(np.searchsorted(times, s, side="right") - 1)
        j = min(max(j, 0), len(times) - 2)
        w = (s - times[j]) / (times[j + 1] - times[j])
        return j, float(min(max(w, 0.0), 1.0))

    def at(self, s: float) -> DivFreeField:
        """Velocity at ``s``; linear in time between samples."""
        if len(self.times) == 1:
            return self.y[0]
        j, w = self._locate(s)
        if w == 0.0:
            return self.y[j]
        if w == 1.0:
            return self.y[j + 1]
        return self.y[j] * (1.0 - w) + self.y[j + 1] * w

    __call__ = at

    def pressure(self, s: float) -> ScalarField:
        if len(self.times) == 1:
            return self.p[0]
        j, w = self._locate(s)
        if w == 0.0:
            return self.p[j]
        if w == 1.0:
            return self.p[j + 1]
        return self.p[j] * (1.0 - w) + self.p[j + 1] * w


class _SpectralNS:
    """Forward 2D Navier-Stokes on an rfft grid, disk-truncated at K_max."""

    def __init__(self, nu: float, K_max: float):
        self.nu = nu
        self.K_max = float(K_max)
        Kb = int(math.floor(K_max))
        self.Kb = Kb
        G = 3 * Kb + 2
        self.G = G + (G % 2)
        G = self.G
        k1 = np.fft.fftfreq(G, 1.0 / G)[:, None]
        k2 = np.fft.rfftfreq(G, 1.0 / G)[None, :]
        self.k1 = np.broadcast_to(k1, (G, G // 2 + 1)).astype(float)
        self.k2 = np.broadcast_to(k2, (G, G // 2 + 1)).astype(float)
        self.ksq = self.k1 ** 2 + self.k2 ** 2
        self.mask = self.ksq <= self.K_max ** 2 + 1e-9
        safe = np.where(self.ksq == 0, 1.0, self.ksq)
        self.inv_ksq = 1.0 / safe

    def from_field(self, v: VectorField) -> np.ndarray:
        G, Kb = self.G, self.Kb
        v = v.resized(Kb)
        out = np.zeros((2, G, G // 2 + 1), dtype=complex)
        ks = np.arange(-Kb, Kb + 1)
        sel = ks >= 0
        out[:, (ks % G)[:, None], ks[sel][None, :]] = v.hat[:, :, sel] * G * G
        return out * self.mask

    def to_field(self, uh: np.ndarray) -> VectorField:
        G, Kb = self.G, self.Kb
        ks = np.arange(-Kb, Kb + 1)
        hat = np.zeros((2, 2 * Kb + 1, 2 * Kb + 1), dtype=complex)
        pos = ks >= 0
        hat[:, :, pos] = uh[:, (ks % G)[:, None], ks[pos][None, :]]
        # negative k2 from conjugate symmetry
        neg = ks < 0
        hat[:, :, neg] = np.conj(uh[:, ((-ks) % G)[:, None], (-ks[neg])[None, :]])
        return VectorField(hat / (G * G), 2)

    def project(self, fh: np.ndarray) -> np.ndarray:
        kdot = self.k1 * fh[0] + self.k2 * fh[1]
        return np.stack([fh[0] - self.k1 * kdot * self.inv_ksq,
                         fh[1] - self.k2 * kdot * self.inv_ksq])

    def physical(self, uh: np.ndarray) -> np.ndarray:
        return np.fft.irfft2(uh, s=(self.G, self.G), axes=(-2, -1))

    def rhs(self, uh: np.ndarray) -> np.ndarray:
        """``-P[(u.grad)u]`` restricted to the disk."""
        u = self.physical(uh)
        d1 = self.physical(1j * self.k1 * uh)
        d2 = self.physical(1j * self.k2 * uh)
        adv = u[0] * d1 + u[1] * d2
        fh = np.fft.rfft2(adv, axes=(-2, -1))
        return -self.project(fh) * self.mask

    def speed_bound(self, uh: np.ndarray) -> float:
        u = self.physical(uh)
        return float(np.abs(u[0]).max() + np.abs(u[1]).max())


def solve_backward_ns(h: DivFreeField, nu: float, t: float, T: float, dt: float,
                      K_max: float = 16, record_every: int = 1,
                      cfl_max: float = 1.0) -> NSTrajectory:
    """Backward Navier-Stokes from terminal data ``h`` on ``[t, T]``.

    Raises :class:`CFLError` if ``dt * (max|u_1| + max|u_2|) * K_max`` exceeds
    ``cfl_max`` at any step and :class:`BlowupError` if a coefficient
    exceeds 1e6.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not T > t:
        raise ValueError("need T > t")
    if nu < 0:
        raise ValueError("nu must be nonnegative")
    n_steps = int(round((T - t) / dt))
    if n_steps < 1 or abs(n_steps * dt - (T - t)) > 1e-9 * max(1.0, T - t):
        raise ValueError(f"dt={dt} does not divide T - t = {T - t}")
    dt = (T - t) / n_steps
    hv = as_vector_field(h)
    if hv.K > 0:
        modes_out = np.argwhere(np.abs(hv.hat).max(axis=0) > 0) - hv.K
        if len(modes_out) and (modes_out ** 2).sum(axis=1).max() > K_max ** 2 + 1e-9:
            raise ValueError("terminal field is not bandlimited within K_max")
    alpha = getattr(h, "alpha", 3)

    solver = _SpectralNS(nu, K_max)
    uh = solver.from_field(hv * -1.0)
    E = np.exp(-nu * solver.ksq * dt / 2.0)
    E2 = E * E

    def snapshot(uh_now) -> tuple[DivFreeField, ScalarField]:
        vf = solver.to_field(uh_now)
        y = leray_project(vf * -1.0, alpha, K_max)
        return y, pressure_from_velocity(vf)

    u_states = [snapshot(uh)]
    for step in range(1, n_steps + 1):
        if dt * solver.speed_bound(uh) * K_max > cfl_max:
            raise CFLError(f"CFL violated at step {step}: dt={dt}, K_max={K_max}")
        k1 = solver.rhs(uh)
        k2 = solver.rhs(E * (uh + 0.5 * dt * k1))
        k3 = solver.rhs(E * uh + 0.5 * dt * k2)
        k4 = solver.rhs(E2 * uh + dt * E * k3)
        uh = E2 * uh + dt / 6.0 * (E2 * k1 + 2.0 * E * (k2 + k3) + k4)
        uh *= solver.mask
        peak = np.abs(uh).max() / solver.G ** 2
        if not np.isfinite(peak) or peak > BLOWUP_BOUND:
            raise BlowupError(f"coefficient magnitude {peak:.3g} at step {step}")
        if step % record_every == 0 or step == n_steps:
            u_states.append(snapshot(uh))
    taus = [0.0] + [dt * k for k in range(1, n_steps + 1) if k % record_every == 0 or k == n_steps]
    # reverse: y(s) = -u(T - s)
    times = np.array([T - tau for tau in taus[::-1]])
    times[0] = t if abs(times[0] - t) < 1e-9 else times[0]
    ys = [st[0] for st in u_states[::-1]]
    ps = [st[1] for st in u_states[::-1]]
    ys[-1] = h if isinstance(h, DivFreeField) and h.K_max == K_max else ys[-1]
    return NSTrajectory(times, ys, ps, nu, {"dt": dt, "K_max": K_max, "grid": solver.G})


def exact_trajectory(params: TGParams, t: float, dt: float, K_max: float = 16,
                     alpha: int = 3) -> NSTrajectory:
    """Closed-form Taylor-Green pair on the same time grid a solve would use."""
    n_steps = int(round((params.T - t) / dt))
    times = np.linspace(t, params.T, n_steps + 1)
    pairs = [taylor_green_backward(params, s, K_max, alpha) for s in times]
    return NSTrajectory(times, [a for a, _ in pairs], [b for _, b in pairs], params.nu,
                        {"dt": dt, "K_max": K_max, "exact": True})


def _time_derivative(hats: np.ndarray, dt: float, order: int) -> tuple[np.ndarray, slice]:
    if order == 2:
        return (hats[2:] - hats[:-2]) / (2.0 * dt), slice(1, -1)
    if order == 4:
        d = (-hats[4:] + 8.0 * hats[3:-1] - 8.0 * hats[1:-3] + hats[:-4]) / (12.0 * dt)
        return d, slice(2, -2)
    raise ValueError("order must be 2 or 4")


def ns_residual(traj: NSTrajectory, order: int = 2) -> tuple[float, np.ndarray, np.ndarray]:
    """``||d_s y + grad p + (y.grad)y + nu Lap y||_L2`` at interior times.

    ``d_s`` uses centered differences of the given order (2 or 4) on a
    uniform time grid.  Returns ``(max, times, series)``.
    """
    n = len(traj.times)
    need = 3 if order == 2 else 5
    if n < need:
        raise ValueError(f"need at least {need} time points for order {order}")
    steps = np.diff(traj.times)
    dt = float(steps.mean())
    if np.abs(steps - dt).max() > 1e-9 * max(1.0, dt):
        raise ValueError("ns_residual needs a uniform time grid")
    vfs = [as_vector_field(y) for y in traj.y]
    K = max(v.K for v in vfs)
    hats = np.stack([v.resized(K).hat for v in vfs])
    dy, inner = _time_derivative(hats, dt, order)
    idx = np.arange(n)[inner]
    out = np.empty(len(idx))
    for j, i in enumerate(idx):
        y = vfs[i].resized(K)
        lhs = VectorField(dy[j], 2) + y.laplacian() * traj.nu
        res = lhs + advect(y, y) + traj.p[i].gradient()
        out[j] = math.sqrt(res.l2_sq())
    return float(out.max(initial=0.0)), traj.times[idx], out


def energy_series(traj: NSTrajectory) -> tuple[np.ndarray, np.ndarray]:
    """Squared ``||y(s)||`` and ``||grad y(s)||`` in L2 at each sample time."""
    vfs = [as_vector_field(y) for y in traj.y]
    return (np.array([v.l2_sq() for v in vfs]), np.array([v.grad_l2_sq() for v in vfs]))


def energy_defect(traj: NSTrajectory, rule: str = "simpson") -> float:
    """``max_s | ||y(s)||^2 + 2 nu int_s^T ||grad y||^2 dr - ||h||^2 |``.

    ``rule`` is ``"simpson"`` (fourth order) or ``"trapezoid"``.
    """
    e, g = energy_series(traj)
    if len(e) == 1:
        return 0.0
    x = traj.T - traj.times[::-1]
    f = g[::-1]
    if rule == "simpson":
        tail = cumulative_simpson(f, x=x, initial=0.0)
    elif rule == "trapezoid":
        tail = np.concatenate([[0.0], np.cumsum(0.5 * (f[1:] + f[:-1]) * np.diff(x))])
    else:
        raise ValueError(f"unknown rule {rule!r}")
    tail = tail[::-1]
    return float(np.max(np.abs(e + 2.0 * traj.nu * tail - e[-1])))


def forward_residual(traj: NSTrajectory, order: int = 2) -> float:
    """Residual of ``u(tau) = -y(T - tau)`` in the forward equations
    ``d_tau u + (u.grad)u = nu Lap u - grad p``."""
    times = traj.T - traj.times[::-1]
    us = [as_vector_field(y) * -1.0 for y in traj.y[::-1]]
    K = max(u.K for u in us)
    hats = np.stack([u.resized(K).hat for u in us])
    steps = np.diff(times)
    du, inner = _time_derivative(hats, float(steps.mean()), order)
    ps = traj.p[::-1]
    worst = 0.0
    for j, i in enumerate(np.arange(len(times))[inner]):
        u = us[i].resized(K)
        res = VectorField(du[j], 2) + advect(u, u) - u.laplacian() * traj.nu + ps[i].gradient()
        worst = max(worst, math.sqrt(res.l2_sq()))
    return worst


def sup_error(a, b, G: int = 32) -> float:
    """Max pointwise Euclidean distance between two fields on a G x G grid."""
    pts = uniform_grid(G, 2).reshape(-1, 2)
    return float(np.max(np.linalg.norm(a.evaluate(pts) - b.evaluate(pts), axis=-1)))


def trajectory_summary(traj: NSTrajectory, order: int = 2) -> list[dict]:
    """Rows (s, ||y||, ||grad y||, energy_defect, residual) for CSV export."""
    e, g = energy_series(traj)
    x = traj.T - traj.times[::-1]
    rows = []
    tail = cumulative_simpson(g[::-1], x=x, initial=0.0) if len(x) > 1 else np.zeros(1)
    tail = tail[::-1]
    res = np.full(len(e), np.nan)
    if len(e) >= (3 if order == 2 else 5):
        _, rt, rv = ns_residual(traj, order)
        lo = (len(e) - len(rv)) // 2
        res[lo:lo + len(rv)] = rv
    for i, s in enumerate(traj.times):
        rows.append({"s": float(s), "l2": math.sqrt(e[i]), "grad_l2": math.sqrt(g[i]),
                     "energy_defect": float(e[i] + 2 * traj.nu * tail[i] - e[-1]),
                     "residual": float(res[i])})
    return rows
