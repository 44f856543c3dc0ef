"""Half-lattice enumeration, divergence-free trigonometric basis fields and
the noise-amplitude calibration.

Fields live on the flat torus [0, 2*pi)^n.  A nonzero mode ``k`` belongs to
the positive half-lattice when its first nonzero coordinate is positive; the
zero mode carries the constant unit fields.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

KINDS = ("A", "B")


def is_positive_halflattice(k: Sequence[int]) -> bool:
    """True iff the first nonzero coordinate of ``k`` is positive."""
    for ki in k:
        if ki != 0:
            return ki > 0
    return False


def modes_up_to(N: float, n: int = 2) -> list[tuple[int, ...]]:
    """Half-lattice modes with ``0 < |k| <= N`` in lexicographic order.

    The zero mode is not included; callers handle it separately.
    """
    if N < 0:
        raise ValueError(f"cutoff must be nonnegative, got {N}")
    r = int(math.floor(N))
    n2 = N * N
    out = []
    for k in itertools.product(range(-r, r + 1), repeat=n):
        if is_positive_halflattice(k) and sum(ki * ki for ki in k) <= n2 + 1e-9:
            out.append(tuple(int(ki) for ki in k))
    return out


def perp2(k: Sequence[int]) -> tuple[int, int]:
    """Rotated vector (k2, -k1), orthogonal to ``k`` with the same length."""
    if len(k) != 2:
        raise ValueError("perp2 is only defined for n = 2")
    return (int(k[1]), -int(k[0]))


def _norm2(k: Sequence[int]) -> int:
    return int(sum(int(ki) * int(ki) for ki in k))


@dataclass(frozen=True)
class FrameN:
    """n-1 mutually orthogonal vectors of length |k|, each orthogonal to k."""

    k: tuple[int, ...]
    perps: tuple[tuple[float, ...], ...]

    def as_array(self) -> np.ndarray:
        return np.array(self.perps, dtype=float)


def orthogonal_frame(k: Sequence[int], n: int | None = None) -> FrameN:
    """Complete ``k`` to an orthogonal frame of vectors of length ``|k|``.

    Gram-Schmidt runs in exact rationals over the standard basis vectors
    sorted by increasing alignment with ``k``; only the final rescaling to
    length ``|k|`` is done in floating point.
    """
    k = tuple(int(ki) for ki in k)
    n = len(k) if n is None else n
    if len(k) != n:
        raise ValueError(f"mode {k} does not have dimension {n}")
    if n < 2:
        raise ValueError("frames need n >= 2")
    if all(ki == 0 for ki in k):
        raise ValueError("orthogonal frame is undefined for k = 0")
    if n == 2:
        return FrameN(k, (tuple(float(c) for c in perp2(k)),))

    def dot(u, v):
        return sum(a * b for a, b in zip(u, v))

    basis = [[Fraction(x) for x in k]]
    order = sorted(range(n), key=lambda i: (abs(k[i]), i))
    for i in order:
        v = [Fraction(int(j == i)) for j in range(n)]
        for b in basis:
            c = dot(v, b) / dot(b, b)
            v = [vi - c * bi for vi, bi in zip(v, b)]
        if any(vi != 0 for vi in v):
            basis.append(v)
        if len(basis) == n:
            break
    length = math.sqrt(_norm2(k))
    perps = []
    for v in basis[1:]:
        scale = length / math.sqrt(float(dot(v, v)))
        perps.append(tuple(float(vi) * scale for vi in v))
    return FrameN(k, tuple(perps))


@dataclass(frozen=True)
class BasisField:
    """One divergence-free basis field ``|k|^(-alpha-1) trig(k.theta) kbar``.

    For the zero mode the field is the constant ``direction`` (a unit vector)
    and ``scale`` is 1.  ``kind`` selects cos ("A") or sin ("B").
    """

    k: tuple[int, ...]
    kind: str
    alpha: int
    direction: tuple[float, ...]
    slot: int = 1

    @property
    def n(self) -> int:
        return len(self.k)

    @property
    def is_constant(self) -> bool:
        return all(ki == 0 for ki in self.k)

    @property
    def scale(self) -> float:
        # |k|^(-alpha-1) * |kbar| with a unit direction
        if self.is_constant:
            return 1.0
        return _norm2(self.k) ** (-self.alpha / 2.0)

    @property
    def vector(self) -> np.ndarray:
        """Direction times amplitude: the field is ``vector * trig(k.theta)``."""
        return self.scale * np.asarray(self.direction, dtype=float)

    def evaluate(self, points) -> np.ndarray:
        """Values at ``points`` of shape (..., n); returns shape (..., n)."""
        pts = np.asarray(points, dtype=float)
        if self.is_constant:
            return np.broadcast_to(self.vector, pts.shape).copy()
        phase = pts @ np.asarray(self.k, dtype=float)
        trig = np.cos(phase) if self.kind == "A" else np.sin(phase)
        return trig[..., None] * self.vector

    def to_json(self) -> dict:
        return {"k": list(self.k), "kind": self.kind, "alpha": self.alpha, "slot": self.slot}


def basis_field(k: Sequence[int], kind: str, alpha: int, n: int | None = None,
                frame_slot: int = 1) -> BasisField:
    """Basis field for mode ``k``.

    In two dimensions the direction is ``perp2(k)`` and the zero mode gives
    (1, 0) for kind A and (0, 1) for kind B.  For ``n >= 3`` the direction is
    vector ``frame_slot`` (1-based) of :func:`orthogonal_frame`; the zero
    mode has n constant fields, selected by ``frame_slot`` with kind A.
    """
    k = tuple(int(ki) for ki in k)
    n = len(k) if n is None else n
    if len(k) != n:
        raise ValueError(f"mode {k} does not have dimension {n}")
    if kind not in KINDS:
        raise ValueError(f"kind must be 'A' or 'B', got {kind!r}")
    zero = all(ki == 0 for ki in k)
    if not zero and not is_positive_halflattice(k):
        raise ValueError(f"mode {k} is not in the positive half-lattice")
    if n == 2:
        if frame_slot != 1:
            raise ValueError("frame_slot must be 1 in two dimensions")
        if zero:
            direction = (1.0, 0.0) if kind == "A" else (0.0, 1.0)
        else:
            kb = perp2(k)
            length = math.sqrt(_norm2(k))
            direction = (kb[0] / length, kb[1] / length)
        return BasisField(k, kind, alpha, direction, frame_slot)
    if zero:
        if kind != "A" or not 1 <= frame_slot <= n:
            raise ValueError(f"zero mode in n={n} has kind A and slots 1..{n}")
        direction = tuple(float(i == frame_slot - 1) for i in range(n))
        return BasisField(k, kind, alpha, direction, frame_slot)
    if not 1 <= frame_slot <= n - 1:
        raise ValueError(f"frame_slot must lie in 1..{n - 1}, got {frame_slot}")
    v = np.array(orthogonal_frame(k, n).perps[frame_slot - 1])
    direction = tuple(v / np.linalg.norm(v))
    return BasisField(k, kind, alpha, direction, frame_slot)


def noise_fields(N: float, alpha: int, n: int = 2) -> list[BasisField]:
    """Noise fields in increment order: zero mode first, then modes in
    :func:`modes_up_to` order with A before B (each over frame slots)."""
    out = []
    if n == 2:
        out += [basis_field((0, 0), "A", alpha), basis_field((0, 0), "B", alpha)]
    else:
        out += [basis_field((0,) * n, "A", alpha, n, i) for i in range(1, n + 1)]
    for k in modes_up_to(N, n):
        for kind in KINDS:
            for slot in range(1, n):
                out.append(basis_field(k, kind, alpha, n, slot))
    return out


def mode_weight_sum(N: float, alpha: int, n: int = 2) -> float:
    """Sum over half-lattice modes ``0 < |k| <= N`` of ``|k|^(-2 alpha)``."""
    # pairwise-stable order: sum smallest terms first
    terms = sorted((_norm2(k) ** (-alpha) for k in modes_up_to(N, n)))
    return math.fsum(terms)


def calibration_factor(N: float, alpha: int, n: int = 2) -> float:
    """``1 + (n-1)/n * sum |k|^(-2 alpha)``; the noise operator equals
    ``eps^2 / 2 * calibration_factor`` times the Laplacian."""
    return 1.0 + (n - 1) / n * mode_weight_sum(N, alpha, n)


def epsilon_from_nu(nu: float, N: float, alpha: int, n: int = 2) -> float:
    """Noise amplitude making the noise-generated operator equal ``nu * Laplacian``."""
    if not nu > 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    return math.sqrt(2.0 * nu / calibration_factor(N, alpha, n))


def basis_norm_alpha(k: Sequence[int], alpha: int) -> float:
    """Squared strong norm of the 2D basis field: 2 pi^2 (|k|^(-2 alpha) + 1)."""
    if len(k) != 2:
        raise ValueError("basis_norm_alpha is defined for n = 2")
    if all(ki == 0 for ki in k):
        raise ValueError("k = 0: constant fields have squared L2 norm (2 pi)^2 by convention")
    return 2.0 * math.pi ** 2 * (_norm2(k) ** (-float(alpha)) + 1.0)


@dataclass(frozen=True)
class NoiseBasisSpec:
    """Noise cutoff, Sobolev index and viscosity; ``epsilon`` is derived."""

    N: float
    alpha: int
    nu: float
    n: int = 2
    epsilon: float = field(init=False)

    def __post_init__(self):
        if self.N < 0:
            raise ValueError("N must be nonnegative")
        if int(self.alpha) != self.alpha or self.alpha < 1:
            raise ValueError(f"alpha must be a positive integer, got {self.alpha}")
        if self.n < 2:
            raise ValueError("n must be at least 2")
        object.__setattr__(self, "epsilon", epsilon_from_nu(self.nu, self.N, self.alpha, self.n))

    @property
    def sobolev_admissible(self) -> bool:
        """Whether ``alpha > n/2 + 1``, the regularity the theory asks for."""
        return self.alpha > self.n / 2 + 1

    def fields(self) -> list[BasisField]:
        return noise_fields(self.N, self.alpha, self.n)

    @property
    def n_noise(self) -> int:
        return len(self.fields())

    def calibration_residual(self) -> float:
        """Relative error in reproducing ``nu`` from ``epsilon``."""
        nu_back = 0.5 * self.epsilon ** 2 * calibration_factor(self.N, self.alpha, self.n)
        return abs(nu_back - self.nu) / self.nu

    def to_json(self) -> dict:
        return {"N": self.N, "alpha": self.alpha, "nu": self.nu, "n": self.n,
                "epsilon": self.epsilon}
