"""
Semi-implicit time stepping for the porous medium SPDE and its skeleton.

One step solves ``u - dt*s*L Psi(u) = x + dt*s*Phi(x) + forcing`` by damped
Newton with a tridiagonal Jacobian; ``s`` is the drift multiplier (1 for the
small-noise equation, eps^2 for the short-time rescaling, 0 for pure noise).
Every solve is batched over paths, one row per path, and each row is
computed independently of the others so results do not depend on batching.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .model import ModelSpec, PsiForm, phi
from .noise import Control, NoiseSpec, WienerPath, pl_derivative, piecewise_linear, qw_trajectory
from .spaces import Discretization, Trajectory, check_field, from_modes, norm_H

NEWTON_TOL = 1e-10
NEWTON_MAXIT = 50
JACOBIAN_ETA = 1e-12
BLOWUP = 1e8


class SolverError(RuntimeError):
    """A trajectory had to be aborted (Newton failure after retry, or blow-up)."""


class NewtonError(SolverError):
    pass


@dataclass
class StepReport:
    newton_iters: int
    residual: float
    dt_used: float


@numba.njit(cache=True, nogil=True)
def _newton_rows(x, rhs, coef, r, theta1, h, tol, maxit, eta, out, iters, resid):
    """Solve u - coef * L(theta1 |u|^(r-1) u) = rhs row by row.

    ``iters[p]`` counts residual evaluations of the accepted iterates (1 when
    the initial guess already satisfies the tolerance); -1 marks failure.
    """
    P, M = rhs.shape
    c = coef / (h * h)
    ps = np.empty(M + 2)
    F = np.empty(M)
    trial = np.empty(M)
    du = np.empty(M)
    dp = np.empty(M)
    cp = np.empty(M)
    ps[0] = 0.0
    ps[M + 1] = 0.0
    for p in range(P):
        u = out[p]
        for j in range(M):
            u[j] = x[p, j]
        rn = 0.0
        for j in range(M):
            rn += rhs[p, j] * rhs[p, j]
        tol_p = tol * max(1.0, np.sqrt(h * rn))

        for j in range(M):
            ps[j + 1] = theta1 * abs(u[j]) ** (r - 1.0) * u[j]
        nrm = 0.0
        for j in range(M):
            F[j] = u[j] - c * (ps[j] - 2.0 * ps[j + 1] + ps[j + 2]) - rhs[p, j]
            nrm += F[j] * F[j]
        nrm = np.sqrt(h * nrm)

        iters[p] = -1
        resid[p] = nrm
        it = 0
        while True:
            it += 1
            if nrm <= tol_p:
                iters[p] = it
                resid[p] = nrm
                break
            if it > maxit:
                resid[p] = nrm
                break
            # Jacobian I - c * T diag(Psi'(u)), T the [1,-2,1] stencil; Thomas sweep
            for j in range(M):
                dp[j] = r * theta1 * (abs(u[j]) + eta) ** (r - 1.0)
            b0 = 1.0 + 2.0 * c * dp[0]
            sup = -c * dp[1] if M > 1 else 0.0
            cp[0] = sup / b0
            du[0] = -F[0] / b0
            for j in range(1, M):
                sub = -c * dp[j - 1]
                sup = -c * dp[j + 1] if j + 1 < M else 0.0
                den = 1.0 + 2.0 * c * dp[j] - sub * cp[j - 1]
                cp[j] = sup / den
                du[j] = (-F[j] - sub * du[j - 1]) / den
            for j in range(M - 2, -1, -1):
                du[j] -= cp[j] * du[j + 1]

            lam = 1.0
            accepted = False
            tn = nrm
            for _ in range(40):
                for j in range(M):
                    trial[j] = u[j] + lam * du[j]
                    ps[j + 1] = theta1 * abs(trial[j]) ** (r - 1.0) * trial[j]
                tn = 0.0
                for j in range(M):
                    v = trial[j] - c * (ps[j] - 2.0 * ps[j + 1] + ps[j + 2]) - rhs[p, j]
                    tn += v * v
                tn = np.sqrt(h * tn)
                if tn < nrm or tn <= tol_p:
                    accepted = True
                    break
                lam *= 0.5
            if not accepted:
                resid[p] = nrm
                break
            for j in range(M):
                u[j] = trial[j]
                F[j] = u[j] - c * (ps[j] - 2.0 * ps[j + 1] + ps[j + 2]) - rhs[p, j]
            nrm = tn


def _newton(spec: ModelSpec, x, rhs, coef, d, tol, maxit=NEWTON_MAXIT):
    if spec.psi_form is not PsiForm.POWER_LAW:
        raise NotImplementedError(spec.psi_form)
    x = np.ascontiguousarray(x, dtype=float)
    rhs = np.ascontiguousarray(rhs, dtype=float)
    out = np.empty_like(rhs)
    iters = np.empty(rhs.shape[0], dtype=np.int64)
    resid = np.empty(rhs.shape[0])
    if coef == 0.0:
        out[:] = rhs
        iters[:] = 0
        resid[:] = 0.0
        return out, iters, resid
    _newton_rows(x, rhs, float(coef), float(spec.r), float(spec.theta1), d.h, float(tol), int(maxit),
                 JACOBIAN_ETA, out, iters, resid)
    return out, iters, resid


def implicit_step(spec: ModelSpec, x, dt: float, forcing, d: Discretization, *,
                  drift_scale: float = 1.0, newton_tol: float = NEWTON_TOL):
    """One backward-Euler step in Psi with Phi and the forcing explicit."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    x = check_field(x, d).reshape(1, d.M)
    forcing = check_field(forcing, d).reshape(1, d.M)
    rhs = x + (dt * drift_scale) * phi(spec, x) + forcing
    u, it, res = _newton(spec, x, rhs, dt * drift_scale, d, newton_tol)
    if it[0] < 0:
        raise NewtonError(f"Newton did not converge in {NEWTON_MAXIT} iterations (residual {res[0]:.3g})")
    return u[0], StepReport(int(it[0]), float(res[0]), dt)


@dataclass
class BatchResult:
    states: np.ndarray  # (P, K+1, M); NaN after an abort
    ok: np.ndarray  # (P,) bool
    newton_iters: np.ndarray  # (P,) total Newton iterations

    @property
    def n_failed(self) -> int:
        return int(np.sum(~self.ok))


def integrate(spec: ModelSpec, x0, forcing, d: Discretization, *, drift_scale: float = 1.0,
              newton_tol: float = NEWTON_TOL) -> BatchResult:
    """Integrate many paths at once.

    ``forcing`` has shape (P, K, M): the additive increment entering step i.
    A row whose Newton solve fails is retried once with two half steps
    (forcing split evenly); a second failure or ``max|X| > 1e8`` aborts it.
    """
    forcing = np.asarray(forcing, dtype=float)
    P, K, M = forcing.shape
    if K != d.K or M != d.M:
        raise ValueError(f"forcing shape {forcing.shape} does not match (P, {d.K}, {d.M})")
    x0 = check_field(x0, d)
    states = np.empty((P, K + 1, M))
    states[:, 0] = np.broadcast_to(x0, (P, M))
    ok = np.ones(P, dtype=bool)
    total_iters = np.zeros(P, dtype=np.int64)
    dt = d.dt
    coef = dt * drift_scale

    for i in range(K):
        rows = np.flatnonzero(ok)
        if rows.size == 0:
            states[:, i + 1] = np.nan
            continue
        x = states[rows, i]
        rhs = x + coef * phi(spec, x) + forcing[rows, i]
        u, it, _ = _newton(spec, x, rhs, coef, d, newton_tol)
        bad = it < 0
        if bad.any():
            xb = x[bad]
            fb = 0.5 * forcing[rows[bad], i]
            rhs1 = xb + 0.5 * coef * phi(spec, xb) + fb
            u1, it1, _ = _newton(spec, xb, rhs1, 0.5 * coef, d, newton_tol)
            rhs2 = u1 + 0.5 * coef * phi(spec, u1) + fb
            u2, it2, _ = _newton(spec, u1, rhs2, 0.5 * coef, d, newton_tol)
            failed = (it1 < 0) | (it2 < 0)
            u2[failed] = np.nan
            u[bad] = u2
            it[bad] = np.where(failed, 0, it1 + it2)
        with np.errstate(invalid="ignore"):
            blown = ~np.all(np.isfinite(u), axis=1) | (np.max(np.abs(u), axis=1) > BLOWUP)
        u[blown] = np.nan
        total_iters[rows] += np.maximum(it, 0)
        states[rows, i + 1] = u
        dead = rows[blown]
        ok[dead] = False
        if dead.size:
            states[dead, i + 2 :] = np.nan
    return BatchResult(states, ok, total_iters)


# forcing builders; all return (P, K, M)

def noise_forcing(ns: NoiseSpec, increments, eps: float, d: Discretization) -> np.ndarray:
    """eps * sum_k q_k dB_{i,k} e_k for stacked increments (P, K, n_modes)."""
    ns.check(d)
    return from_modes(eps * ns.array * np.asarray(increments), d)


def pl_noise_forcing(ns: NoiseSpec, increments, eps: float, N: int, d: Discretization) -> np.ndarray:
    """Per-step forcing of the N-interval piecewise-linear interpolant of eps*Q*W."""
    increments = np.asarray(increments)
    if d.K % N:
        raise ValueError(f"N = {N} must divide K = {d.K}")
    step = d.K // N
    P, K, n = increments.shape
    coarse = increments.reshape(P, N, step, n).sum(axis=2)
    slopes = eps * ns.array * coarse * (N / d.T)
    per_step = np.repeat(slopes, step, axis=1) * d.dt
    return from_modes(per_step, d)


def control_forcing(coeffs, d: Discretization, q=None) -> np.ndarray:
    """dt * sum_k (q_k) c_{i,k} e_k for stacked control coefficients (P, K, n)."""
    c = np.asarray(coeffs, dtype=float)
    if q is not None:
        c = c * np.asarray(q)[: c.shape[-1]]
    return from_modes(d.dt * c, d)


def _single(spec, x0, forcing, d, drift_scale=1.0) -> Trajectory:
    res = integrate(spec, x0, forcing[None], d, drift_scale=drift_scale)
    if not res.ok[0]:
        raise SolverError("trajectory aborted (Newton failure after retry, or blow-up)")
    return Trajectory(res.states[0], d)


def solve_spde(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, w: WienerPath, d: Discretization,
               *, drift_scale: float = 1.0) -> Trajectory:
    """dX = s(L Psi(X) + Phi(X)) dt + eps Q dW with additive Euler-Maruyama noise."""
    return _single(spec, x0, noise_forcing(ns, w.increments[None], eps, d)[0], d, drift_scale)


def solve_skeleton(spec: ModelSpec, ns: NoiseSpec | None, x0, ctrl: Control, d: Discretization,
                   *, raw: bool = False, drift_scale: float = 1.0) -> Trajectory:
    """dz/dt = L Psi(z) + Phi(z) + forcing, forcing Q phi (default) or phi itself (``raw``)."""
    if ctrl.K != d.K:
        raise ValueError(f"control has {ctrl.K} steps, mesh has {d.K}")
    q = None
    if not raw:
        if ns is None:
            raise ValueError("Q-driven skeleton needs a NoiseSpec")
        if ctrl.n_modes > ns.n_modes:
            raise ValueError("control has more modes than the noise")
        q = ns.array
    return _single(spec, x0, control_forcing(ctrl.coeffs[None], d, q)[0], d, drift_scale)


def solve_projected(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, n: int, w: WienerPath,
                    d: Discretization) -> Trajectory:
    """SPDE driven by P_n Q W (multipliers above n set to zero)."""
    return solve_spde(spec, ns.truncated(n), x0, eps, w, d)


def solve_pl_noise(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, n: int, N: int, w: WienerPath,
                   d: Discretization) -> Trajectory:
    """Skeleton driven by eps * d/dt (P_n Q W)^(N), built from the sampled path."""
    path = qw_trajectory(ns.truncated(n), w, eps, d)
    ctrl = pl_derivative(piecewise_linear(path, N), N, ns.n_modes)
    return solve_skeleton(spec, None, x0, ctrl, d, raw=True)


def solve_short_time(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, w: WienerPath,
                     d: Discretization) -> Trajectory:
    """Time-rescaled equation: drift multiplied by eps^2, noise by eps."""
    return solve_spde(spec, ns, x0, eps, w, d, drift_scale=eps**2)


def sup_distance(a, b, d: Discretization) -> np.ndarray:
    """sup_t ||a_t - b_t||_H for stacked trajectories (..., K+1, M)."""
    return np.max(norm_H(np.asarray(a) - np.asarray(b), d), axis=-1)
