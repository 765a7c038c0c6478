"""
Diagonal Hilbert-Schmidt noise, Wiener increments, controls and the
piecewise-linear path approximation.

``Q e_k = q_k e_k`` in the sine basis, so ``P_n Q = Q P_n`` and every
HS norm is an explicit sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .spaces import Discretization, Trajectory, from_modes, to_modes


@dataclass(frozen=True)
class NoiseSpec:
    q: tuple[float, ...]

    def __post_init__(self):
        q = tuple(float(v) for v in np.atleast_1d(self.q))
        if not q:
            raise ValueError("NoiseSpec needs at least one mode")
        if any(v < 0 or not np.isfinite(v) for v in q):
            raise ValueError("noise multipliers must be finite and nonnegative")
        object.__setattr__(self, "q", q)

    @classmethod
    def from_decay(cls, beta: float, n_modes: int, scale: float = 1.0) -> "NoiseSpec":
        """q_k = scale * k^(-beta)."""
        return cls(tuple(scale * np.arange(1, n_modes + 1, dtype=float) ** (-beta)))

    @property
    def n_modes(self) -> int:
        return len(self.q)

    @property
    def array(self) -> np.ndarray:
        return np.array(self.q)

    def truncated(self, n: int) -> "NoiseSpec":
        """Multipliers of P_n Q: zero above mode n (mode count unchanged)."""
        if not 0 <= n <= self.n_modes:
            raise ValueError(f"truncation {n} outside 0..{self.n_modes}")
        q = self.array
        q[n:] = 0.0
        return NoiseSpec(tuple(q))

    def check(self, d: Discretization) -> None:
        if self.n_modes > d.M:
            raise ValueError(f"n_modes = {self.n_modes} exceeds M = {d.M}")


def hs_norm_sq(ns: NoiseSpec, d: Discretization) -> float:
    """q(Q) = sum_k q_k^2 ||e_k||_H^2 = sum_k q_k^2 / |mu_k|."""
    ns.check(d)
    q = ns.array
    return float(np.sum(q**2 / np.abs(d.eigenvalues[: ns.n_modes])))


def truncation_defect(ns: NoiseSpec, n: int, d: Discretization) -> float:
    """delta(n) = q(P_n Q - Q) = sum_{k>n} q_k^2 / |mu_k|."""
    ns.check(d)
    q = ns.array[n:]
    return float(np.sum(q**2 / np.abs(d.eigenvalues[n : ns.n_modes])))


def path_rng(seed: int, path_index: int) -> np.random.Generator:
    """Counter-based (Philox) stream keyed by ``(seed, path_index)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(path_index)])))


@dataclass(frozen=True)
class WienerPath:
    increments: np.ndarray  # (K, n_modes), each entry ~ N(0, dt)
    seed: int
    path_index: int
    dt: float

    def cumulative(self) -> np.ndarray:
        """W at t_0..t_K, shape (K+1, n_modes); W_0 = 0."""
        out = np.zeros((self.increments.shape[0] + 1, self.increments.shape[1]))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


def sample_increments(ns: NoiseSpec, d: Discretization, seed: int, path_indices) -> np.ndarray:
    """Stacked increments for several paths, shape (P, K, n_modes)."""
    path_indices = np.atleast_1d(path_indices)
    out = np.empty((len(path_indices), d.K, ns.n_modes))
    sd = np.sqrt(d.dt)
    for row, idx in enumerate(path_indices):
        out[row] = sd * path_rng(seed, idx).standard_normal((d.K, ns.n_modes))
    return out


def sample_path(ns: NoiseSpec, d: Discretization, seed: int, path_index: int) -> WienerPath:
    inc = sample_increments(ns, d, seed, [path_index])[0]
    return WienerPath(inc, int(seed), int(path_index), d.dt)


def qw_trajectory(ns: NoiseSpec, w: WienerPath, eps: float, d: Discretization) -> Trajectory:
    """The forcing path t_i -> eps * sum_k q_k W_{t_i,k} e_k."""
    ns.check(d)
    if w.increments.shape != (d.K, ns.n_modes):
        raise ValueError(f"increments shape {w.increments.shape} != {(d.K, ns.n_modes)}")
    return Trajectory(from_modes(eps * ns.array * w.cumulative(), d), d)


@dataclass(frozen=True)
class Control:
    """Mode coefficients of phi, piecewise constant on the K-step grid."""

    coeffs: np.ndarray  # (K, n_modes)
    T: float

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 2:
            raise ValueError(f"control coefficients must be 2-D, got shape {c.shape}")
        object.__setattr__(self, "coeffs", c)

    @property
    def K(self) -> int:
        return self.coeffs.shape[0]

    @property
    def n_modes(self) -> int:
        return self.coeffs.shape[1]

    @property
    def dt(self) -> float:
        return self.T / self.K

    def l2_norm_sq(self) -> float:
        return float(self.dt * np.sum(self.coeffs**2))

    def h_norms(self, d: Discretization) -> np.ndarray:
        """||phi_{t_i}||_H per step for a control read as an H-valued forcing."""
        mu = np.abs(d.eigenvalues[: self.n_modes])
        return np.sqrt(np.sum(self.coeffs**2 / mu, axis=1))

    @classmethod
    def zeros(cls, d: Discretization, n_modes: int) -> "Control":
        return cls(np.zeros((d.K, n_modes)), d.T)

    @classmethod
    def from_blocks(cls, blocks, d: Discretization, n_modes: int) -> "Control":
        """Expand ``blocks[k][b]`` (mode k, time block b) to the step grid."""
        blocks = np.atleast_2d(np.asarray(blocks, dtype=float))
        nb = blocks.shape[1]
        if d.K % nb:
            raise ValueError(f"{nb} time blocks do not divide K = {d.K}")
        coeffs = np.zeros((d.K, n_modes))
        coeffs[:, : blocks.shape[0]] = np.repeat(blocks.T, d.K // nb, axis=0)
        return cls(coeffs, d.T)


def _check_division(K: int, N: int) -> int:
    if N < 1 or K % N:
        raise ValueError(f"N = {N} must divide K = {K}")
    return K // N


def piecewise_linear(traj: Trajectory, N: int) -> Trajectory:
    """Interpolate the path linearly between t_i = iT/N, resampled on the K grid."""
    d = traj.d
    step = _check_division(d.K, N)
    nodes = traj.states[::step]
    frac = (np.arange(step) / step)[:, None]
    out = np.empty_like(traj.states)
    for i in range(N):
        out[i * step : (i + 1) * step] = (1.0 - frac) * nodes[i] + frac * nodes[i + 1]
    out[-1] = nodes[-1]
    return Trajectory(out, d)


def pl_derivative(traj: Trajectory, N: int, n_modes: int, range_tol: float = 1e-8) -> Control:
    """Piecewise-constant time derivative of the N-interval interpolant, in mode coefficients."""
    d = traj.d
    step = _check_division(d.K, N)
    nodes = traj.states[::step]
    coef = to_modes(nodes, d)
    outside = np.sum(coef[:, n_modes:] ** 2)
    total = np.sum(coef**2)
    if total > 0 and outside > range_tol**2 * total:
        raise ValueError(
            f"trajectory has relative energy {np.sqrt(outside / total):.3g} outside the first {n_modes} modes"
        )
    slopes = np.diff(coef[:, :n_modes], axis=0) * (N / d.T)
    return Control(np.repeat(slopes, step, axis=0), d.T)
