"""Stochastic particle flows ``dZ = y(s, Z) ds + eps sum_k (A_k(Z) dbA + B_k(Z) dbB)``.

A flow map is represented by its values on a uniform particle grid.  Paths
are vectorized along a leading axis, so ``positions`` has shape
``(P, G, G, 2)``.  The noise of path ``j`` is drawn from its own Philox
stream keyed by ``(seed, *stream, j)``; a path never depends on which other
paths are simulated alongside it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

from .fields import TWO_PI, TrigCache, uniform_grid
from .lattice import NoiseBasisSpec

Observer = Callable[[int, float, np.ndarray, TrigCache], None]


def wrap(x: np.ndarray) -> np.ndarray:
    w = np.mod(x, TWO_PI)
    # tiny negatives round up to exactly 2 pi
    return np.where(w >= TWO_PI, 0.0, w)


def wrap_diff(d: np.ndarray) -> np.ndarray:
    """Representative of a torus difference in [-pi, pi)."""
    return np.mod(d + np.pi, TWO_PI) - np.pi


def torus_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.linalg.norm(wrap_diff(a - b), axis=-1)


@dataclass(frozen=True)
class BrownianDriver:
    """Replayable Brownian increments.

    Increments are Normal(0, dt) and depend only on ``(seed, stream, path)``
    plus the step and noise index.  With ``fine > 1`` each increment is the
    sum of ``fine`` sub-increments of size ``dt / fine``, so drivers built
    with the same ``dt / fine`` share one underlying Brownian path.
    """

    seed: int
    dt: float
    fine: int = 1
    stream: tuple = ()

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.fine < 1:
            raise ValueError("fine must be >= 1")

    def generator(self, path: int) -> np.random.Generator:
        key = [int(self.seed) & 0xFFFFFFFFFFFFFFFF, *[int(s) for s in self.stream], int(path)]
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))

    def increments(self, path: int, n_steps: int, n_noise: int) -> np.ndarray:
        """Array (n_steps, n_noise) for one path."""
        raw = self.generator(path).standard_normal((n_steps * self.fine, n_noise))
        raw *= math.sqrt(self.dt / self.fine)
        if self.fine == 1:
            return raw
        return raw.reshape(n_steps, self.fine, n_noise).sum(axis=1)

    def coarsened(self, factor: int) -> "BrownianDriver":
        """Driver with step ``factor * dt`` on the same Brownian path."""
        return BrownianDriver(self.seed, self.dt * factor, self.fine * factor, self.stream)

    def with_stream(self, *stream) -> "BrownianDriver":
        return BrownianDriver(self.seed, self.dt, self.fine, tuple(stream))


@dataclass(frozen=True, eq=False)
class ParticleGrid:
    """Flow-map values on a G^n grid (optionally with a leading path axis)."""

    positions: np.ndarray

    @classmethod
    def identity(cls, G: int, n: int = 2) -> "ParticleGrid":
        return cls(uniform_grid(G, n))

    @property
    def G(self) -> int:
        return self.positions.shape[-2]

    @property
    def n(self) -> int:
        return self.positions.shape[-1]

    def translated(self, c: Sequence[float]) -> "ParticleGrid":
        return ParticleGrid(wrap(self.positions + np.asarray(c, dtype=float)))


@dataclass(frozen=True, eq=False)
class FlowPath:
    """Recorded particle positions ``Z[i, path, ...]`` at ``times[i]``."""

    times: np.ndarray
    Z: np.ndarray
    increments: np.ndarray          # (P, n_steps, n_noise)
    paths: tuple
    driver: BrownianDriver
    epsilon: float
    spec: NoiseBasisSpec | None = None
    record_stride: int = 1
    meta: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.Z[-1]

    def index_of(self, s: float) -> int:
        i = int(np.argmin(np.abs(self.times - s)))
        if abs(self.times[i] - s) > 1e-9 * max(1.0, abs(s)):
            raise ValueError(f"time {s} not recorded")
        return i

    def manifest(self) -> dict:
        sp = self.spec
        return {"seed": self.driver.seed, "stream": list(self.driver.stream),
                "epsilon": self.epsilon, "N": sp.N if sp else None,
                "alpha": sp.alpha if sp else None, "dt": self.driver.dt,
                "G": int(self.Z.shape[-2]), "paths": list(self.paths)}

    def snapshot_rows(self, i: int = -1, path: int = 0):
        """(particle index, theta_1, theta_2) rows for CSV export."""
        pts = self.Z[i, path].reshape(-1, self.Z.shape[-1])
        return [(j, *map(float, p)) for j, p in enumerate(pts)]


def as_provider(y) -> Callable[[float], object]:
    if callable(y) and not hasattr(y, "evaluate"):
        return y
    if hasattr(y, "at"):
        return y.at
    return lambda s: y


class _Noise:
    """Evaluates ``sum_j F_j(Z) dW_j`` for the noise fields of a spec."""

    def __init__(self, spec: NoiseBasisSpec | None, epsilon: float, n: int):
        self.epsilon = epsilon
        fields = spec.fields() if spec is not None else []
        self.n_noise = len(fields)
        self.const = []     # (column, vector)
        pairs: dict = {}
        for j, bf in enumerate(fields):
            if bf.is_constant:
                self.const.append((j, bf.vector))
            else:
                # A and B of one (mode, slot) share their direction vector
                entry = pairs.setdefault((bf.k, bf.slot), {"vec": bf.vector})
                entry[bf.kind] = j
        self.pairs = [(np.asarray(k, dtype=float), e["A"], e["B"], e["vec"])
                      for (k, _), e in pairs.items()]
        if fields and fields[0].n != n:
            raise ValueError("noise dimension does not match particle dimension")

    def displacement(self, Z: np.ndarray, dW: np.ndarray,
                     cache: TrigCache | None = None) -> np.ndarray:
        """``Z`` has shape (P, ..., n); ``dW`` has shape (P, n_noise).

        ``cache`` must be built on ``Z.reshape(-1, n)``.
        """
        n = Z.shape[-1]
        if self.epsilon == 0.0 or self.n_noise == 0:
            return np.zeros_like(Z)
        if cache is None:
            cache = TrigCache(Z.reshape(-1, n))
        lead = Z.shape[:-1]
        extra = (1,) * (Z.ndim - 2)
        out = [np.zeros(lead) for _ in range(n)]
        shift = np.zeros((Z.shape[0], n))
        for j, vec in self.const:
            shift += dW[:, j][:, None] * vec
        for k, jA, jB, vec in self.pairs:
            c, s = cache.cos_sin(k)
            amp = (c.reshape(lead) * dW[:, jA].reshape((-1,) + extra)
                   + s.reshape(lead) * dW[:, jB].reshape((-1,) + extra))
            for d in range(n):
                if vec[d] != 0.0:
                    out[d] += vec[d] * amp
        for d in range(n):
            out[d] += shift[:, d].reshape((-1,) + extra)
        return np.stack(out, axis=-1) * self.epsilon

    def fields_at(self, Z: np.ndarray) -> np.ndarray:
        """Values of every noise field, shape (n_noise,) + Z.shape."""
        out = np.zeros((self.n_noise,) + Z.shape)
        for j, vec in self.const:
            out[j] = vec
        cache = TrigCache(Z.reshape(-1, Z.shape[-1]))
        for k, jA, jB, vec in self.pairs:
            c, s = cache.cos_sin(k)
            out[jA] = c.reshape(Z.shape[:-1])[..., None] * vec
            out[jB] = s.reshape(Z.shape[:-1])[..., None] * vec
        return out


def step_count(t: float, T: float, dt: float) -> int:
    n = int(round((T - t) / dt))
    if n < 0 or abs(n * dt - (T - t)) > 1e-9 * max(1.0, abs(T - t)):
        raise ValueError(f"dt={dt} does not divide T - t = {T - t}")
    return n


def simulate_forward(y_provider, spec: NoiseBasisSpec | None, driver: BrownianDriver,
                     start: ParticleGrid | np.ndarray, t: float, T: float,
                     paths: Sequence[int] = (0,), epsilon: float | None = None,
                     record: str | int = "all", observer: Observer | None = None) -> FlowPath:
    """Euler-Maruyama flow from ``start`` on ``[t, T]``.

    ``record`` is ``"all"``, ``"final"`` or an integer stride.  ``observer``
    is called as ``observer(i, s_i, Z_i, cache)`` at every time level
    including the first, with ``Z_i`` of shape (P, ..., n) and ``cache`` a
    :class:`TrigCache` on ``Z_i.reshape(-1, n)``.  ``epsilon`` overrides
    ``spec.epsilon`` (e.g. 0 for deterministic characteristics).
    """
    provider = as_provider(y_provider)
    eps = spec.epsilon if epsilon is None else float(epsilon)
    pos0 = start.positions if isinstance(start, ParticleGrid) else np.asarray(start, dtype=float)
    n = pos0.shape[-1]
    noise = _Noise(spec, eps, n)
    n_steps = step_count(t, T, driver.dt)
    dt = driver.dt
    paths = tuple(int(p) for p in paths)
    P = len(paths)
    if pos0.ndim == n + 1:
        Z = np.broadcast_to(pos0, (P,) + pos0.shape).copy()
    elif pos0.ndim == n + 2 and pos0.shape[0] == P:
        Z = pos0.copy()
    else:
        raise ValueError(f"start positions of shape {pos0.shape} do not match {P} paths")
    Z = wrap(Z)
    if noise.n_noise:
        dW = np.stack([driver.increments(p, n_steps, noise.n_noise) for p in paths])
    else:
        dW = np.zeros((P, n_steps, 0))
    stride = 1 if record == "all" else (n_steps if record == "final" else int(record))
    stride = max(stride, 1)
    times = [t]
    rec = [Z.copy()]
    flat_shape = (-1, n)
    cache = TrigCache(Z.reshape(flat_shape))
    if observer is not None:
        observer(0, t, Z, cache)
    for i in range(n_steps):
        s = t + i * dt
        y = provider(s)
        drift = y.evaluate(Z.reshape(flat_shape), cache).reshape(Z.shape)
        Z = Z + drift * dt + noise.displacement(Z, dW[:, i], cache)
        if not np.all(np.isfinite(Z)):
            raise FloatingPointError(f"non-finite particle position at step {i + 1}")
        Z = wrap(Z)
        cache = TrigCache(Z.reshape(flat_shape))
        s_next = t + (i + 1) * dt
        if observer is not None:
            observer(i + 1, s_next, Z, cache)
        if (i + 1) % stride == 0 or i + 1 == n_steps:
            times.append(s_next)
            rec.append(Z.copy())
    return FlowPath(np.array(times), np.stack(rec), dW, paths, driver, eps, spec,
                    stride, {"n_steps": n_steps})


def rk4_characteristics(y_provider, start: np.ndarray, t: float, T: float, dt: float) -> np.ndarray:
    """Deterministic characteristics dZ/ds = y(s, Z) by classical RK4."""
    provider = as_provider(y_provider)
    n_steps = step_count(t, T, dt)
    Z = np.asarray(start, dtype=float).copy()
    shape = Z.shape
    flat = (-1, shape[-1])

    def f(s, z):
        return provider(s).evaluate(z.reshape(flat)).reshape(shape)

    for i in range(n_steps):
        s = t + i * dt
        k1 = f(s, Z)
        k2 = f(s + dt / 2, Z + dt / 2 * k1)
        k3 = f(s + dt / 2, Z + dt / 2 * k2)
        k4 = f(s + dt, Z + dt * k3)
        Z = Z + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return Z


def jacobian_determinant(Z: np.ndarray) -> np.ndarray:
    """Centered-difference det J of a 2D grid map (periodic wrap).

    ``Z`` has shape (..., G, G, 2); returns shape (..., G, G).
    """
    G = Z.shape[-2]
    h = TWO_PI / G
    ax1, ax2 = Z.ndim - 3, Z.ndim - 2
    # torus differences of neighbors, corrected for the grid offset 2h
    d1 = wrap_diff(np.roll(Z, -1, axis=ax1) - np.roll(Z, 1, axis=ax1)) / (2 * h)
    d2 = wrap_diff(np.roll(Z, -1, axis=ax2) - np.roll(Z, 1, axis=ax2)) / (2 * h)
    return d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]


def volume_distortion(path: FlowPath, s: float | None = None) -> np.ndarray:
    """``max |det J - 1|`` over the grid, one value per path."""
    if path.Z.shape[-1] != 2:
        raise ValueError("volume_distortion is implemented for n = 2")
    if path.Z.shape[-2] < 16:
        raise ValueError("volume_distortion needs G >= 16")
    i = -1 if s is None else path.index_of(s)
    det = jacobian_determinant(path.Z[i])
    return np.abs(det - 1.0).reshape(det.shape[0], -1).max(axis=1)


def compose(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """``outer o inner`` for grid maps (G, G, 2): bilinear interpolation of the
    periodic displacement ``outer - identity`` at the points ``inner``."""
    G = outer.shape[-2]
    ident = uniform_grid(G, 2)
    disp = wrap_diff(outer - ident)
    coords = (wrap(inner) * (G / TWO_PI)).reshape(-1, 2).T
    out = np.empty(inner.shape)
    for c in range(2):
        vals = map_coordinates(disp[..., c], coords, order=1, mode="grid-wrap")
        out[..., c] = vals.reshape(inner.shape[:-1])
    return wrap(inner + out)


def right_translation_check(y_provider, spec: NoiseBasisSpec, driver: BrownianDriver,
                            xi: ParticleGrid | np.ndarray, t: float, T: float,
                            path: int = 0, epsilon: float | None = None) -> float:
    """Sup torus distance between ``Z^{t,xi}_T`` and ``Z^{t,e}_T o xi``."""
    xi_pos = xi.positions if isinstance(xi, ParticleGrid) else np.asarray(xi, dtype=float)
    G = xi_pos.shape[-2]
    direct = simulate_forward(y_provider, spec, driver, xi_pos, t, T, (path,), epsilon,
                              record="final").final[0]
    base = simulate_forward(y_provider, spec, driver, ParticleGrid.identity(G), t, T, (path,),
                            epsilon, record="final").final[0]
    composed = compose(base, xi_pos)
    return float(torus_distance(direct, composed).max())


def pairwise_distance_defect(Z0: np.ndarray, Z1: np.ndarray, sample: int = 64) -> float:
    """Max change of torus distances between the first ``sample`` particles."""
    a = Z0.reshape(-1, Z0.shape[-1])[:sample]
    b = Z1.reshape(-1, Z1.shape[-1])[:sample]
    da = np.linalg.norm(wrap_diff(a[:, None] - a[None]), axis=-1)
    db = np.linalg.norm(wrap_diff(b[:, None] - b[None]), axis=-1)
    return float(np.abs(da - db).max())
