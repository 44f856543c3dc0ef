"""Spectral vector and scalar fields on the torus [0, 2*pi)^n.

Fields are trigonometric polynomials stored as centered complex Fourier
coefficients ``hat[..., K + k_1, ..., K + k_n]`` for ``|k_i| <= K`` with
``f(theta) = sum_k hat_k exp(i k.theta)``.  Products are formed on a padded
grid wide enough to hold the full product band, so ``advect`` and the
nested derivatives used by the Laplacian identity carry no aliasing error.

:class:`DivFreeField` is the two-dimensional divergence-free field written
in the real cos/sin basis of :mod:`torus_fbsde.lattice`.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

from .lattice import BasisField, NoiseBasisSpec, basis_field, modes_up_to

TWO_PI = 2.0 * np.pi
_EVAL_CHUNK = 1 << 16


def _box(K: int) -> np.ndarray:
    return np.arange(-K, K + 1)


def _wavevectors(K: int, n: int) -> list[np.ndarray]:
    """Broadcastable wavenumber arrays, one per axis."""
    ks = _box(K)
    out = []
    for d in range(n):
        shape = [1] * n
        shape[d] = 2 * K + 1
        out.append(ks.reshape(shape))
    return out


def _ksq(K: int, n: int) -> np.ndarray:
    return sum(k.astype(float) ** 2 for k in _wavevectors(K, n))


def _resize(hat: np.ndarray, n: int, K_new: int) -> np.ndarray:
    """Pad with zeros or truncate the trailing n box axes to half-width K_new."""
    K_old = (hat.shape[-1] - 1) // 2
    if K_new == K_old:
        return hat
    lead = hat.shape[: hat.ndim - n]
    out = np.zeros(lead + (2 * K_new + 1,) * n, dtype=complex)
    m = min(K_old, K_new)
    src = tuple(slice(K_old - m, K_old + m + 1) for _ in range(n))
    dst = tuple(slice(K_new - m, K_new + m + 1) for _ in range(n))
    out[(Ellipsis,) + dst] = hat[(Ellipsis,) + src]
    return out


def _spectral_to_grid(hat: np.ndarray, n: int, G: int) -> np.ndarray:
    K = (hat.shape[-1] - 1) // 2
    if G < 2 * K + 1:
        K = _effective_band(hat, n)
        if G < 2 * K + 1:
            raise ValueError(f"grid size {G} cannot represent band {K}")
        hat = _resize(hat, n, K)
    lead = hat.shape[: hat.ndim - n]
    full = np.zeros(lead + (G,) * n, dtype=complex)
    idx = _box(K) % G
    full[(Ellipsis,) + np.ix_(*([idx] * n))] = hat
    axes = tuple(range(hat.ndim - n, hat.ndim))
    return np.fft.ifftn(full, axes=axes).real * G ** n


def _grid_to_spectral(values: np.ndarray, n: int, K: int) -> np.ndarray:
    G = values.shape[-1]
    if G < 2 * K + 1:
        raise ValueError(f"grid size {G} cannot resolve band {K}")
    axes = tuple(range(values.ndim - n, values.ndim))
    full = np.fft.fftn(values, axes=axes) / G ** n
    idx = _box(K) % G
    return full[(Ellipsis,) + np.ix_(*([idx] * n))]


def _harmonics(x: np.ndarray, K: int) -> np.ndarray:
    """Table of exp(i m x) for m = -K..K, shape (len(x), 2K+1)."""
    e = np.cos(x) + 1j * np.sin(x)
    table = np.empty((x.shape[0], 2 * K + 1), dtype=complex)
    table[:, K] = 1.0
    for m in range(1, K + 1):
        table[:, K + m] = table[:, K + m - 1] * e
    if K:
        table[:, :K] = np.conj(table[:, 2 * K:K:-1])
    return table


def _effective_band(hat: np.ndarray, n: int) -> int:
    """Smallest half-width that holds every nonzero coefficient."""
    K = (hat.shape[-1] - 1) // 2
    mag = np.abs(hat).reshape((-1,) + hat.shape[hat.ndim - n:]) if hat.ndim > n else np.abs(hat)[None]
    nz = np.nonzero(mag.max(axis=0))
    if len(nz[0]) == 0:
        return 0
    return int(max(np.abs(ax - K).max() for ax in nz))


def _sparse_terms(hat: np.ndarray, n: int):
    """Nonzero coefficients on one side of each conjugate pair.

    Returns ``(modes, coeffs)`` with ``modes`` of shape (m, n) and ``coeffs``
    of shape (m, C); the zero mode is included with half weight so that
    ``f = sum 2 Re(c e^{ik.x})`` holds for every listed term.
    """
    K = (hat.shape[-1] - 1) // 2
    mag = np.abs(hat).max(axis=0)
    idx = np.argwhere(mag > 0)
    ks = idx - K
    keep = []
    for row, k in zip(idx, ks):
        first = next((x for x in k if x != 0), 0)
        if first >= 0:
            keep.append((tuple(row), k, first == 0))
    modes = np.array([k for _, k, _ in keep], dtype=float).reshape(-1, n)
    coeffs = np.array([hat[(slice(None),) + r] * (0.5 if z else 1.0) for r, _, z in keep])
    return modes, coeffs.reshape(len(keep), hat.shape[0])


class TrigCache:
    """cos(k.x) and sin(k.x) at fixed points, built by angle addition.

    Only the axis harmonics cos(x_d), sin(x_d) call into libm; every other
    mode is assembled from previously cached ones, so fields evaluated at
    the same points share their trigonometric work.
    """

    def __init__(self, points: np.ndarray):
        self.points = points
        self._memo: dict = {}

    def cos_sin(self, k) -> tuple[np.ndarray, np.ndarray]:
        k = tuple(int(x) for x in k)
        first = next((x for x in k if x != 0), 0)
        if first < 0:
            c, s = self.cos_sin(tuple(-x for x in k))
            return c, -s
        hit = self._memo.get(k)
        if hit is not None:
            return hit
        nz = [d for d, x in enumerate(k) if x != 0]
        if not nz:
            raise ValueError("zero mode has no phase")
        if len(nz) == 1 and k[nz[0]] == 1:
            x = self.points[:, nz[0]]
            out = (np.cos(x), np.sin(x))
        else:
            # peel one unit step off the last nonzero axis
            d = nz[-1]
            step = 1 if k[d] > 0 else -1
            rest = list(k)
            rest[d] -= step
            a_c, a_s = self.cos_sin(rest)
            b_c, b_s = self.cos_sin(tuple(step if i == d else 0 for i in range(len(k))))
            out = (a_c * b_c - a_s * b_s, a_s * b_c + a_c * b_s)
        self._memo[k] = out
        return out


def _evaluate_sparse(modes: np.ndarray, coeffs: np.ndarray, points: np.ndarray,
                     cache: TrigCache | None = None) -> np.ndarray:
    cache = TrigCache(points) if cache is None else cache
    C = coeffs.shape[1]
    out = np.zeros((C, points.shape[0]))
    for k, c in zip(modes, coeffs):
        if not np.any(k):
            out += 2.0 * c.real[:, None]
            continue
        cr, ci = 2.0 * c.real, -2.0 * c.imag
        cs, sn = cache.cos_sin(k)
        for j in range(C):
            if cr[j] != 0.0:
                out[j] += cr[j] * cs
            if ci[j] != 0.0:
                out[j] += ci[j] * sn
    return out.T


def _evaluate_hat(hat: np.ndarray, n: int, points: np.ndarray,
                  cache: TrigCache | None = None) -> np.ndarray:
    """Exact trigonometric sum at arbitrary points.

    ``hat`` has shape (C,) + box; returns real array (P, C).  Fields with
    few active modes are summed term by term, others through separable
    harmonic tables.
    """
    K = _effective_band(hat, n)
    hat = _resize(hat, n, K)
    n_active = int(np.count_nonzero(np.abs(hat).max(axis=0)))
    if n_active <= 2 * (2 * K + 1):
        modes, coeffs = _sparse_terms(hat, n)
        return _evaluate_sparse(modes, coeffs, points, cache)
    P = points.shape[0]
    C = hat.shape[0]
    out = np.empty((P, C))
    for start in range(0, P, _EVAL_CHUNK):
        pts = points[start:start + _EVAL_CHUNK]
        tabs = [_harmonics(pts[:, d], K) for d in range(n)]
        # contract the first axis through BLAS, the rest point by point
        acc = np.tensordot(tabs[0], hat, axes=([1], [1]))  # (p, C, a2, ..., an)
        for d in range(1, n):
            shape = [tabs[d].shape[0], 1, tabs[d].shape[1]] + [1] * (n - d - 1)
            acc = (acc * tabs[d].reshape(shape)).sum(axis=2)
        out[start:start + pts.shape[0]] = acc.real
    return out


def _wrap_points(points, n: int) -> tuple[np.ndarray, tuple]:
    pts = np.asarray(points, dtype=float)
    if pts.shape[-1] != n:
        raise ValueError(f"points must have trailing dimension {n}, got {pts.shape}")
    lead = pts.shape[:-1]
    # trigonometric sums are periodic, so no wrapping is needed
    return pts.reshape(-1, n), lead


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real scalar trigonometric polynomial (e.g. a pressure)."""

    hat: np.ndarray
    n: int = 2

    @property
    def K(self) -> int:
        return (self.hat.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, K: int = 0, n: int = 2) -> "ScalarField":
        return cls(np.zeros((2 * K + 1,) * n, dtype=complex), n)

    @classmethod
    def from_grid(cls, values: np.ndarray, K: int) -> "ScalarField":
        n = values.ndim
        return cls(_grid_to_spectral(values, n, K), n)

    def to_grid(self, G: int) -> np.ndarray:
        return _spectral_to_grid(self.hat, self.n, G)

    def evaluate(self, points, cache: TrigCache | None = None) -> np.ndarray:
        pts, lead = _wrap_points(points, self.n)
        return _evaluate_hat(self.hat[None], self.n, pts, cache)[:, 0].reshape(lead)

    def gradient(self) -> "VectorField":
        ks = _wavevectors(self.K, self.n)
        return VectorField(np.stack([1j * k * self.hat for k in ks]), self.n)

    def laplacian(self) -> "ScalarField":
        return ScalarField(-_ksq(self.K, self.n) * self.hat, self.n)

    def resized(self, K: int) -> "ScalarField":
        return ScalarField(_resize(self.hat, self.n, K), self.n)

    def mean(self) -> float:
        return float(self.hat[(self.K,) * self.n].real)

    def l2_sq(self) -> float:
        return float(TWO_PI ** self.n * np.sum(np.abs(self.hat) ** 2))

    def __add__(self, other: "ScalarField") -> "ScalarField":
        K = max(self.K, other.K)
        return ScalarField(_resize(self.hat, self.n, K) + _resize(other.hat, self.n, K), self.n)

    def __sub__(self, other: "ScalarField") -> "ScalarField":
        return self + other * -1.0

    def __mul__(self, c: float) -> "ScalarField":
        return ScalarField(self.hat * c, self.n)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class VectorField:
    """Real vector field with ``n`` components; ``hat`` has shape (n,) + box."""

    hat: np.ndarray
    n: int = 2

    @property
    def K(self) -> int:
        return (self.hat.shape[-1] - 1) // 2

    @classmethod
    def zeros(cls, K: int = 0, n: int = 2) -> "VectorField":
        return cls(np.zeros((n,) + (2 * K + 1,) * n, dtype=complex), n)

    @classmethod
    def constant(cls, c: Sequence[float]) -> "VectorField":
        n = len(c)
        hat = np.zeros((n,) + (1,) * n, dtype=complex)
        hat[(slice(None),) + (0,) * n] = np.asarray(c, dtype=float)
        return cls(hat, n)

    @classmethod
    def from_grid(cls, values: np.ndarray, K: int) -> "VectorField":
        """``values`` has shape (n, G, ..., G)."""
        n = values.shape[0]
        return cls(_grid_to_spectral(values, n, K), n)

    @classmethod
    def from_basis(cls, bf: BasisField) -> "VectorField":
        n = bf.n
        K = int(max(abs(ki) for ki in bf.k)) if not bf.is_constant else 0
        hat = np.zeros((n,) + (2 * K + 1,) * n, dtype=complex)
        v = bf.vector
        if bf.is_constant:
            hat[(slice(None),) + (K,) * n] = v
        else:
            pos = tuple(K + ki for ki in bf.k)
            neg = tuple(K - ki for ki in bf.k)
            c = 0.5 if bf.kind == "A" else -0.5j
            hat[(slice(None),) + pos] += c * v
            hat[(slice(None),) + neg] += np.conj(c) * v
        return cls(hat, n)

    def to_grid(self, G: int) -> np.ndarray:
        return _spectral_to_grid(self.hat, self.n, G)

    def evaluate(self, points, cache: TrigCache | None = None) -> np.ndarray:
        pts, lead = _wrap_points(points, self.n)
        return _evaluate_hat(self.hat, self.n, pts, cache).reshape(lead + (self.n,))

    def resized(self, K: int) -> "VectorField":
        return VectorField(_resize(self.hat, self.n, K), self.n)

    def component(self, i: int) -> ScalarField:
        return ScalarField(self.hat[i], self.n)

    def partial(self, d: int) -> "VectorField":
        k = _wavevectors(self.K, self.n)[d]
        return VectorField(1j * k * self.hat, self.n)

    def divergence(self) -> ScalarField:
        ks = _wavevectors(self.K, self.n)
        return ScalarField(sum(1j * ks[d] * self.hat[d] for d in range(self.n)), self.n)

    def laplacian(self) -> "VectorField":
        return VectorField(-_ksq(self.K, self.n) * self.hat, self.n)

    def l2_sq(self) -> float:
        return float(TWO_PI ** self.n * np.sum(np.abs(self.hat) ** 2))

    def grad_l2_sq(self) -> float:
        return float(TWO_PI ** self.n * np.sum(_ksq(self.K, self.n) * np.abs(self.hat) ** 2))

    def inner(self, other: "VectorField") -> float:
        K = max(self.K, other.K)
        a = _resize(self.hat, self.n, K)
        b = _resize(other.hat, self.n, K)
        return float(TWO_PI ** self.n * np.sum(a * np.conj(b)).real)

    def conjugate_defect(self) -> float:
        """Max |hat_k - conj(hat_{-k})|; zero for a real field."""
        flipped = self.hat[(slice(None),) + (slice(None, None, -1),) * self.n]
        return float(np.max(np.abs(self.hat - np.conj(flipped)), initial=0.0))

    def __add__(self, other: "VectorField") -> "VectorField":
        K = max(self.K, other.K)
        return VectorField(_resize(self.hat, self.n, K) + _resize(other.hat, self.n, K), self.n)

    def __sub__(self, other: "VectorField") -> "VectorField":
        return self + other * -1.0

    def __mul__(self, c: float) -> "VectorField":
        return VectorField(self.hat * c, self.n)

    __rmul__ = __mul__


def _half_modes_in_box(K_max: float) -> np.ndarray:
    modes = modes_up_to(K_max, 2)
    return np.array(modes, dtype=int).reshape(-1, 2)


@dataclass(frozen=True, eq=False)
class DivFreeField:
    """Divergence-free 2D field ``mean + sum_k aA_k A_k + aB_k B_k``.

    ``modes`` lists every half-lattice mode with ``|k| <= K_max`` in
    lexicographic order; ``aA`` and ``aB`` are aligned with it.  ``alpha``
    sets the basis scaling ``|k|^(-alpha-1)``.
    """

    alpha: int
    K_max: float
    aA: np.ndarray
    aB: np.ndarray
    mean: np.ndarray

    def __post_init__(self):
        m = len(self.modes)
        if self.aA.shape != (m,) or self.aB.shape != (m,) or self.mean.shape != (2,):
            raise ValueError("coefficient arrays do not match the mode set")
        if not (np.all(np.isfinite(self.aA)) and np.all(np.isfinite(self.aB))
                and np.all(np.isfinite(self.mean))):
            raise ValueError("coefficients must be finite")

    n = 2

    @cached_property
    def modes(self) -> np.ndarray:
        return _half_modes_in_box(self.K_max)

    @cached_property
    def _scale(self) -> np.ndarray:
        ksq = (self.modes ** 2).sum(axis=1).astype(float)
        return ksq ** (-(self.alpha + 1) / 2.0)

    @classmethod
    def zeros(cls, K_max: float = 16, alpha: int = 3) -> "DivFreeField":
        m = len(_half_modes_in_box(K_max))
        return cls(alpha, K_max, np.zeros(m), np.zeros(m), np.zeros(2))

    @classmethod
    def constant(cls, c: Sequence[float], K_max: float = 16, alpha: int = 3) -> "DivFreeField":
        m = len(_half_modes_in_box(K_max))
        return cls(alpha, K_max, np.zeros(m), np.zeros(m), np.asarray(c, dtype=float))

    @classmethod
    def from_modes(cls, coeffs: dict, K_max: float = 16, alpha: int = 3,
                   mean: Sequence[float] = (0.0, 0.0)) -> "DivFreeField":
        """Build from ``{(k1, k2): (aA, aB)}``."""
        field = cls.zeros(K_max, alpha)
        index = {tuple(k): i for i, k in enumerate(field.modes.tolist())}
        aA, aB = field.aA.copy(), field.aB.copy()
        for k, (a, b) in coeffs.items():
            k = tuple(int(x) for x in k)
            if k not in index:
                raise ValueError(f"mode {k} is not a half-lattice mode with |k| <= {K_max}")
            aA[index[k]] = a
            aB[index[k]] = b
        return cls(alpha, K_max, aA, aB, np.asarray(mean, dtype=float))

    @cached_property
    def vector_field(self) -> VectorField:
        K = int(math.floor(self.K_max))
        hat = np.zeros((2, 2 * K + 1, 2 * K + 1), dtype=complex)
        hat[:, K, K] = self.mean
        if len(self.modes):
            k1, k2 = self.modes[:, 0], self.modes[:, 1]
            c = 0.5 * self._scale * (self.aA - 1j * self.aB)
            kbar = np.stack([k2, -k1]).astype(float)
            hat[:, K + k1, K + k2] = kbar * c
            hat[:, K - k1, K - k2] = kbar * np.conj(c)
        return VectorField(hat, 2)

    def to_vector_field(self) -> VectorField:
        return self.vector_field

    def evaluate(self, points, cache: TrigCache | None = None) -> np.ndarray:
        return self.vector_field.evaluate(points, cache)

    def to_grid(self, G: int) -> np.ndarray:
        return self.vector_field.to_grid(G)

    def coefficient_vector(self) -> np.ndarray:
        return np.concatenate([self.mean, self.aA, self.aB])

    def with_coefficient_vector(self, v: np.ndarray) -> "DivFreeField":
        m = len(self.modes)
        return DivFreeField(self.alpha, self.K_max, v[2:2 + m].copy(), v[2 + m:].copy(), v[:2].copy())

    def max_abs_coefficient(self) -> float:
        return float(np.max(np.abs(self.coefficient_vector()), initial=0.0))

    def pruned(self, atol: float) -> "DivFreeField":
        """Zero every coefficient whose physical amplitude is below ``atol``."""
        keep = np.maximum(np.abs(self.aA), np.abs(self.aB)) * self._scale * np.sqrt(
            (self.modes ** 2).sum(axis=1)) >= atol
        return DivFreeField(self.alpha, self.K_max, np.where(keep, self.aA, 0.0),
                            np.where(keep, self.aB, 0.0), self.mean.copy())

    def _check_compatible(self, other: "DivFreeField"):
        if self.alpha != other.alpha or self.K_max != other.K_max:
            raise ValueError("fields have different alpha or K_max")

    def __add__(self, other: "DivFreeField") -> "DivFreeField":
        self._check_compatible(other)
        return DivFreeField(self.alpha, self.K_max, self.aA + other.aA, self.aB + other.aB,
                            self.mean + other.mean)

    def __sub__(self, other: "DivFreeField") -> "DivFreeField":
        return self + other * -1.0

    def __mul__(self, c: float) -> "DivFreeField":
        return DivFreeField(self.alpha, self.K_max, self.aA * c, self.aB * c, self.mean * c)

    __rmul__ = __mul__

    def to_json(self) -> dict:
        modes = [{"k": [int(k[0]), int(k[1])], "aA": float(a), "aB": float(b)}
                 for k, a, b in zip(self.modes, self.aA, self.aB) if a != 0.0 or b != 0.0]
        return {"alpha": int(self.alpha), "K_max": self.K_max,
                "mean": [float(self.mean[0]), float(self.mean[1])], "modes": modes}

    @classmethod
    def from_json(cls, data: dict, K_max: float | None = None) -> "DivFreeField":
        if K_max is None:
            K_max = data.get("K_max")
        if K_max is None:
            K_max = max([math.hypot(*m["k"]) for m in data["modes"]], default=0.0)
        coeffs = {tuple(m["k"]): (m.get("aA", 0.0), m.get("aB", 0.0)) for m in data["modes"]}
        return cls.from_modes(coeffs, K_max, int(data["alpha"]), data.get("mean", (0.0, 0.0)))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def evaluate(field, points, cache: TrigCache | None = None) -> np.ndarray:
    """Point values of a scalar, vector or divergence-free field."""
    return field.evaluate(points, cache)


def as_vector_field(field) -> VectorField:
    if isinstance(field, DivFreeField):
        return field.vector_field
    if isinstance(field, BasisField):
        return VectorField.from_basis(field)
    if isinstance(field, VectorField):
        return field
    raise TypeError(f"cannot convert {type(field).__name__} to a vector field")


def uniform_grid(G: int, n: int = 2) -> np.ndarray:
    """Grid points of the identity map, shape (G, ..., G, n)."""
    x = TWO_PI * np.arange(G) / G
    mesh = np.meshgrid(*([x] * n), indexing="ij")
    return np.stack(mesh, axis=-1)


def project_divergence_free(v: VectorField) -> VectorField:
    """Hodge projection: drop the gradient part of every Fourier coefficient."""
    ks = _wavevectors(v.K, v.n)
    ksq = _ksq(v.K, v.n)
    safe = np.where(ksq == 0, 1.0, ksq)
    kdotv = sum(ks[d] * v.hat[d] for d in range(v.n))
    hat = np.stack([v.hat[d] - ks[d] * kdotv / safe for d in range(v.n)])
    return VectorField(hat, v.n)


def leray_project(v: VectorField, alpha: int = 3, K_max: float | None = None):
    """Divergence-free part of ``v``.

    In two dimensions the result is a :class:`DivFreeField`; by default
    ``K_max = sqrt(2) * v.K`` so that no coefficient of ``v`` is dropped.
    In higher dimensions the projected :class:`VectorField` is returned.
    """
    v = as_vector_field(v)
    if v.n != 2:
        return project_divergence_free(v)
    if K_max is None:
        K_max = math.sqrt(2.0) * v.K
    out = DivFreeField.zeros(K_max, alpha)
    K = v.K
    modes = out.modes
    aA = np.zeros(len(modes))
    aB = np.zeros(len(modes))
    if len(modes):
        inside = (np.abs(modes) <= K).all(axis=1)
        k1, k2 = modes[inside, 0], modes[inside, 1]
        w = v.hat[:, K + k1, K + k2]
        ksq = (k1 ** 2 + k2 ** 2).astype(float)
        c = (w[0] * k2 - w[1] * k1) / ksq          # component along kbar / |k|^2
        amp = 2.0 * ksq ** ((alpha + 1) / 2.0)
        aA[inside] = amp * c.real
        aB[inside] = -amp * c.imag
    mean = v.hat[:, K, K].real.copy()
    return DivFreeField(alpha, K_max, aA, aB, mean)


def product_grid_size(band: int, minimum: int = 0) -> int:
    """Even grid size that represents a trigonometric polynomial of ``band``."""
    G = 2 * band + 2
    return max(G, minimum)


def advect(u, v, resolution: int = 0) -> VectorField:
    """``(u . grad) v`` formed exactly on a padded grid.

    The output band is ``u.K + v.K``; no truncation is applied, so the
    result is exact for trigonometric-polynomial inputs.
    """
    u = as_vector_field(u)
    v = as_vector_field(v)
    if u.n != v.n:
        raise ValueError(f"dimension mismatch: {u.n} vs {v.n}")
    n = u.n
    band = u.K + v.K
    G = product_grid_size(band, resolution)
    ug = u.to_grid(G)
    acc = np.zeros((n,) + (G,) * n)
    for d in range(n):
        acc += ug[d] * v.partial(d).to_grid(G)
    return VectorField.from_grid(acc, band)


def scalar_advect(u, f: ScalarField, resolution: int = 0) -> ScalarField:
    """``(u . grad) f`` for a scalar ``f``."""
    u = as_vector_field(u)
    band = u.K + f.K
    G = product_grid_size(band, resolution)
    ug = u.to_grid(G)
    g = f.gradient()
    acc = sum(ug[d] * g.component(d).to_grid(G) for d in range(u.n))
    return ScalarField.from_grid(acc, band)


def directional_derivative(k: Sequence[int], kind: str, y, alpha: int | None = None,
                           frame_slot: int = 1) -> VectorField:
    """``(F . grad) y`` for the basis field ``F`` of mode ``k``.

    For the 2D zero mode this is d/dtheta_1 (kind A) or d/dtheta_2 (kind B).
    ``alpha`` defaults to ``y.alpha`` when ``y`` is a :class:`DivFreeField`.
    """
    y = y if not isinstance(y, BasisField) else as_vector_field(y)
    if alpha is None:
        alpha = getattr(y, "alpha", 3)
    yv = as_vector_field(y)
    bf = basis_field(k, kind, alpha, yv.n, frame_slot)
    return basis_directional_derivative(bf, yv)


def basis_directional_derivative(bf: BasisField, y) -> VectorField:
    yv = as_vector_field(y)
    if bf.is_constant:
        out = VectorField.zeros(yv.K, yv.n)
        for d, c in enumerate(bf.vector):
            if c != 0.0:
                out = out + yv.partial(d) * float(c)
        return out
    return advect(VectorField.from_basis(bf), yv)


@dataclass(frozen=True)
class FieldNorms:
    """Squared norms: L2, strong H^alpha (weight 1 + |k|^(2 alpha)) and gradient L2."""

    l2: float
    h_alpha: float
    grad_l2: float


def norms(y, alpha: int | None = None) -> FieldNorms:
    if alpha is None:
        alpha = getattr(y, "alpha", 3)
    v = as_vector_field(y)
    ksq = _ksq(v.K, v.n)
    power = TWO_PI ** v.n * np.abs(v.hat) ** 2
    return FieldNorms(
        l2=float(power.sum()),
        h_alpha=float(((1.0 + ksq ** alpha) * power).sum()),
        grad_l2=float((ksq * power).sum()),
    )


def noise_laplacian(V, spec: NoiseBasisSpec, resolution: int = 0) -> VectorField:
    """``eps^2/2 * sum (F . grad)(F . grad) V`` over all noise fields ``F``.

    Each second derivative is formed as two nested exact products; nothing
    about the basis fields is assumed beyond their definition.
    """
    v = as_vector_field(V)
    if v.n != spec.n:
        raise ValueError(f"field dimension {v.n} does not match spec dimension {spec.n}")
    total = VectorField.zeros(v.K, v.n)
    for bf in spec.fields():
        if bf.is_constant:
            first = basis_directional_derivative(bf, v)
            total = total + basis_directional_derivative(bf, first)
        else:
            F = VectorField.from_basis(bf)
            first = advect(F, v, resolution)
            total = total + advect(F, first, resolution)
    return total * (0.5 * spec.epsilon ** 2)


def laplacian_identity_defect(V, spec: NoiseBasisSpec, resolution: int = 0) -> float:
    """Relative L2 defect between the noise operator and ``nu * Laplacian``."""
    v = as_vector_field(V)
    target = v.laplacian() * spec.nu
    scale = target.l2_sq()
    if scale == 0.0:
        raise ValueError("nu * Laplacian(V) vanishes; the relative defect is undefined")
    diff = noise_laplacian(v, spec, resolution) - target
    return math.sqrt(diff.l2_sq() / scale)


def strat_ito_correction(spec: NoiseBasisSpec) -> float:
    """Max over noise modes of ``|(A.grad)A| + |(B.grad)B|`` in L2."""
    worst = 0.0
    groups: dict = {}
    for bf in spec.fields():
        groups.setdefault((bf.k, bf.slot if not bf.is_constant else bf.slot), []).append(bf)
    for fields in groups.values():
        total = 0.0
        for bf in fields:
            if bf.is_constant:
                continue  # derivative of a constant field vanishes identically
            F = VectorField.from_basis(bf)
            total += math.sqrt(advect(F, F).l2_sq())
        worst = max(worst, total)
    return worst


def random_divfree(K_max: float, alpha: int = 3, rng=None, amplitude: float = 1.0,
                   band: float | None = None, with_mean: bool = True) -> DivFreeField:
    """Random divergence-free field with physical amplitudes of order ``amplitude``.

    Coefficients are nonzero only for ``|k| <= band`` (default ``K_max``) and
    decay like ``|k|^-2`` in physical amplitude.
    """
    rng = np.random.default_rng(rng)
    band = K_max if band is None else band
    out = DivFreeField.zeros(K_max, alpha)
    m = out.modes
    ksq = (m ** 2).sum(axis=1).astype(float)
    active = ksq <= band * band + 1e-9
    phys = amplitude * rng.standard_normal((2, len(m))) / (1.0 + ksq)
    conv = ksq ** ((alpha + 1) / 2.0) / np.sqrt(ksq)   # physical amplitude -> coefficient
    aA = np.where(active, phys[0] * conv, 0.0)
    aB = np.where(active, phys[1] * conv, 0.0)
    mean = amplitude * rng.standard_normal(2) * 0.5 if with_mean else np.zeros(2)
    return DivFreeField(alpha, K_max, aA, aB, mean)


def random_vector_field(K: int, n: int = 2, rng=None, amplitude: float = 1.0) -> VectorField:
    """Random real (not divergence-free) field with band ``K``."""
    rng = np.random.default_rng(rng)
    G = 2 * K + 2
    shape = (n,) + (G,) * n
    raw = rng.standard_normal(shape)
    v = VectorField.from_grid(raw, K)
    return v * (amplitude / math.sqrt(max(v.l2_sq(), 1e-300) / TWO_PI ** n))


def write_grid_csv(path, field, G: int) -> None:
    """Grid samples as CSV rows (theta_1, theta_2, v_1, v_2)."""
    pts = uniform_grid(G, 2).reshape(-1, 2)
    vals = np.asarray(field.evaluate(pts)).reshape(len(pts), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["theta_1", "theta_2"] + [f"v_{i + 1}" for i in range(vals.shape[1])]
        w.writerow(cols)
        for p, v in zip(pts, vals):
            w.writerow([repr(float(x)) for x in p] + [repr(float(x)) for x in v])


def strong_norm_quadrature(field, alpha: int, G: int) -> float:
    """``int |v|^2 + v . (-Lap)^alpha v`` by grid quadrature.

    The derivative part applies the spectral Laplacian ``alpha`` times and
    integrates the pointwise product on a G^n grid; for trigonometric
    polynomials with band below G/2 the rule is exact.
    """
    v = as_vector_field(field)
    w = v
    for _ in range(alpha):
        w = w.laplacian() * -1.0
    u = v.to_grid(G)
    wg = w.to_grid(G)
    cell = (TWO_PI / G) ** v.n
    return float(((u * u).sum() + (u * wg).sum()) * cell)
