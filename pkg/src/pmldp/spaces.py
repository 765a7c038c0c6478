"""
Grid, operator and norms on E = [0, 1] with Lebesgue measure.

A field is a plain ``numpy`` array whose last axis holds the M interior nodal
values at ``x_j = j*h``; leading axes (paths, time steps) are allowed wherever
an operation is applied row-wise. Inner products in L^2(m) use the nodal
quadrature weight ``h``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import solve_banded


class DimensionError(ValueError):
    """Field length does not match the discretization."""


@dataclass(frozen=True)
class Discretization:
    """Uniform mesh of M interior nodes on [0, 1] and K time steps on [0, T]."""

    M: int
    T: float
    K: int

    def __post_init__(self):
        if int(self.M) != self.M or self.M < 1:
            raise ValueError(f"M must be a positive integer, got {self.M!r}")
        if int(self.K) != self.K or self.K < 1:
            raise ValueError(f"K must be a positive integer, got {self.K!r}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T!r}")

    @property
    def h(self) -> float:
        return 1.0 / (self.M + 1)

    @property
    def dt(self) -> float:
        return self.T / self.K

    @cached_property
    def x(self) -> np.ndarray:
        return np.arange(1, self.M + 1) * self.h

    @cached_property
    def times(self) -> np.ndarray:
        return np.arange(self.K + 1) * self.dt

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """Discrete Dirichlet eigenvalues mu_k < 0, k = 1..M."""
        k = np.arange(1, self.M + 1)
        # half-angle form avoids the cancellation in 1 - cos for small k
        return -(4.0 / self.h**2) * np.sin(k * np.pi * self.h / 2.0) ** 2

    @property
    def lambda0(self) -> float:
        return float(-self.eigenvalues[0])

    @cached_property
    def basis(self) -> np.ndarray:
        """Rows are the L^2(m)-orthonormalized sine modes (M x M)."""
        n = self.M + 1
        k = np.arange(1, n)
        # reduce the integer phase k*j exactly to [0, n/2] so sin never sees a large argument
        m = np.outer(k, k) % (2 * n)
        sign = np.where(m > n, -1.0, 1.0)
        m = np.where(m > n, m - n, m)
        m = np.minimum(m, n - m)
        return sign * np.sqrt(2.0) * np.sin(np.pi * m / n)

    @cached_property
    def _neg_lap_banded(self) -> np.ndarray:
        ab = np.empty((3, self.M))
        ab[0, :] = -1.0 / self.h**2
        ab[1, :] = 2.0 / self.h**2
        ab[2, :] = -1.0 / self.h**2
        return ab


def check_field(f, d: Discretization) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim == 0 or f.shape[-1] != d.M:
        raise DimensionError(f"expected trailing dimension {d.M}, got shape {f.shape}")
    return f


def apply_L(f, d: Discretization) -> np.ndarray:
    """Second-difference Dirichlet Laplacian, applied along the last axis."""
    f = check_field(f, d)
    padded = np.zeros(f.shape[:-1] + (d.M + 2,))
    padded[..., 1:-1] = f
    return (padded[..., :-2] - 2.0 * f + padded[..., 2:]) / d.h**2


def solve_neg_L(f, d: Discretization) -> np.ndarray:
    """Return g with ``apply_L(g) = -f`` (tridiagonal LAPACK solve)."""
    f = check_field(f, d)
    flat = f.reshape(-1, d.M)
    g = solve_banded((1, 1), d._neg_lap_banded, flat.T, check_finite=False)
    return g.T.reshape(f.shape)


def inner(f, g, d: Discretization) -> np.ndarray:
    """L^2(m) inner product along the last axis."""
    return d.h * np.sum(check_field(f, d) * check_field(g, d), axis=-1)


def norm_H(f, d: Discretization):
    """H = H^{-1} norm, ``sqrt(<f, (-L)^{-1} f>)``."""
    f = check_field(f, d)
    val = inner(f, solve_neg_L(f, d), d)
    return np.sqrt(np.maximum(val, 0.0))


def norm_Lp(f, p: float, d: Discretization):
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    f = check_field(f, d)
    return (d.h * np.sum(np.abs(f) ** p, axis=-1)) ** (1.0 / p)


def eigen_mode(k: int, d: Discretization) -> tuple[np.ndarray, float]:
    """Unnormalized mode ``sqrt(2) sin(k pi x)`` and its discrete eigenvalue."""
    if not 1 <= k <= d.M:
        raise ValueError(f"mode index {k} outside 1..{d.M}")
    return np.sqrt(2.0) * np.sin(k * np.pi * d.x), float(d.eigenvalues[k - 1])


def to_modes(f, d: Discretization, n: int | None = None) -> np.ndarray:
    """Coefficients <f, e_k> for k = 1..n along the last axis."""
    f = check_field(f, d)
    n = d.M if n is None else n
    return d.h * (f @ d.basis[:n].T)


def from_modes(c, d: Discretization) -> np.ndarray:
    """Field sum_k c_k e_k; ``c`` has the mode index on its last axis.

    Accumulates mode by mode so each output row depends only on its own
    coefficients, independent of how many rows are stacked together.
    """
    c = np.asarray(c, dtype=float)
    n = c.shape[-1]
    if n > d.M:
        raise ValueError(f"{n} modes requested on a mesh with M={d.M}")
    out = np.zeros(c.shape[:-1] + (d.M,))
    for k in range(n):
        out += c[..., k : k + 1] * d.basis[k]
    return out


def project(f, n: int, d: Discretization) -> np.ndarray:
    """Orthogonal projection onto the first n modes (same in L^2 and in H)."""
    if not 0 <= n <= d.M:
        raise ValueError(f"projection rank {n} outside 0..{d.M}")
    c = to_modes(f, d, n)
    return c @ d.basis[:n]


def mode_field(expansion, d: Discretization) -> np.ndarray:
    """Build a field from ``{k: coefficient}`` or ``[(k, coefficient), ...]``."""
    items = expansion.items() if hasattr(expansion, "items") else expansion
    c = np.zeros(d.M)
    for k, v in items:
        if not 1 <= k <= d.M:
            raise ValueError(f"mode index {k} outside 1..{d.M}")
        c[k - 1] += v
    return from_modes(c, d)


@dataclass(frozen=True)
class Trajectory:
    """Uniformly sampled path in C([0,T]; H): ``states`` has shape (K+1, M)."""

    states: np.ndarray
    d: Discretization

    def __post_init__(self):
        s = check_field(self.states, self.d)
        if s.shape != (self.d.K + 1, self.d.M):
            raise DimensionError(
                f"trajectory shape {s.shape} != {(self.d.K + 1, self.d.M)}"
            )
        object.__setattr__(self, "states", s)

    @property
    def times(self) -> np.ndarray:
        return self.d.times

    def sup_norm_H(self) -> float:
        return float(np.max(norm_H(self.states, self.d)))

    def distance(self, other: "Trajectory") -> float:
        """sup_t ||z_t - y_t||_H."""
        return float(np.max(norm_H(self.states - other.states, self.d)))
