"""
Rate functionals: the control action, the endpoint-ball rate by penalty
continuation, and the short-time (pure noise) rate in closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelSpec
from .noise import Control, NoiseSpec
from .solver import control_forcing, integrate
from .spaces import Discretization, Trajectory, check_field, norm_H, solve_neg_L, to_modes


@dataclass
class RateResult:
    """``value`` is ``math.inf`` exactly when ``feasible`` is False; ``argmin`` is then None."""

    value: float
    argmin: Control | None
    residual: float
    iterations: int
    feasible: bool = True
    history: list[dict] = field(default_factory=list, repr=False)

    @property
    def is_infinite(self) -> bool:
        return not self.feasible


@dataclass(frozen=True)
class RateOptions:
    n_ctrl_modes: int = 3
    n_ctrl_times: int = 8
    rounds: int = 5
    extra_rounds: int = 3
    rho0: float = 10.0
    rho_factor: float = 10.0
    constraint_tol: float = 1e-4
    max_iter: int = 4000
    gtol: float = 1e-9
    fd_step: float = 1e-5
    drift_scale: float = 1.0
    newton_tol: float = 1e-13


def action(ctrl: Control) -> float:
    """1/2 ||phi||^2 in L^2([0,T] x E)."""
    return 0.5 * ctrl.dt * float(np.sum(ctrl.coeffs**2))


class _EndpointProblem:
    """Endpoint map of the Q-driven skeleton over a coarse block parametrization."""

    def __init__(self, spec, ns, x0, target, delta_c, d, opts):
        self.spec, self.ns, self.d, self.opts = spec, ns, d, opts
        self.x0 = check_field(x0, d)
        self.target = check_field(target, d)
        self.delta_c = delta_c
        self.nm = min(opts.n_ctrl_modes, ns.n_modes)
        self.nb = opts.n_ctrl_times
        if d.K % self.nb:
            raise ValueError(f"{self.nb} control time blocks do not divide K = {d.K}")
        self.block_dt = d.T / self.nb
        self.evals = 0

    def control(self, theta) -> Control:
        return Control.from_blocks(np.reshape(theta, (self.nm, self.nb)), self.d, self.ns.n_modes)

    def endpoints(self, thetas) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        coeffs = np.stack([self.control(t).coeffs for t in thetas])
        res = integrate(self.spec, self.x0, control_forcing(coeffs, self.d, self.ns.array), self.d,
                        drift_scale=self.opts.drift_scale, newton_tol=self.opts.newton_tol)
        self.evals += len(thetas)
        end = res.states[:, -1]
        end[~res.ok] = np.nan
        return end

    def action(self, theta) -> float:
        return 0.5 * self.block_dt * float(np.sum(np.square(theta)))

    def objective(self, theta, rho, end=None):
        if end is None:
            end = self.endpoints(theta)[0]
        dist = float(norm_H(end - self.target, self.d))
        if not np.isfinite(dist):
            return math.inf, dist, end
        viol = max(0.0, dist - self.delta_c)
        return self.action(theta) + rho * viol**2, dist, end

    def gradient(self, theta, rho, end, dist):
        grad = self.block_dt * np.asarray(theta, dtype=float).copy()
        viol = dist - self.delta_c
        if viol <= 0 or dist == 0:
            return grad
        # central differences of the endpoint map, all perturbations in one batch
        n = theta.size
        steps = self.opts.fd_step * np.maximum(1.0, np.abs(theta))
        pert = np.repeat(theta[None, :], 2 * n, axis=0)
        idx = np.arange(n)
        pert[idx, idx] += steps
        pert[n + idx, idx] -= steps
        ends = self.endpoints(pert)
        jac = (ends[:n] - ends[n:]) / (2.0 * steps[:, None])  # (n, M)
        dd = self.d.h * solve_neg_L(end - self.target, self.d) / dist  # d(dist)/d(end)
        return grad + 2.0 * rho * viol * (jac @ dd)


def _descend(prob: _EndpointProblem, theta, rho, opts, step0):
    """Gradient descent with backtracking.

    Trial steps follow the Barzilai-Borwein rule and are accepted under a
    nonmonotone Armijo test against the worst of the last few objective
    values, which copes with the stiff penalty direction at large rho.
    """
    f, dist, end = prob.objective(theta, rho)
    g = prob.gradient(theta, rho, end, dist)
    step = step0
    recent = [f]
    it = 0
    reason = "max_iter"
    for it in range(1, opts.max_iter + 1):
        gn2 = float(g @ g)
        if gn2 <= (opts.gtol * (1.0 + abs(f))) ** 2:
            reason = "gtol"
            break
        ref = max(recent[-10:])
        accepted = False
        for _ in range(60):
            cand = theta - step * g
            fc, dc, ec = prob.objective(cand, rho)
            if fc <= ref - 1e-4 * step * gn2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            reason = "line_search"
            break
        gc = prob.gradient(cand, rho, ec, dc)
        s_vec = cand - theta
        y_vec = gc - g
        sy = float(s_vec @ y_vec)
        step = float(s_vec @ s_vec) / sy if sy > 0 else 2.0 * step
        theta, f, dist, end, g = cand, fc, dc, ec, gc
        recent.append(f)
        window = recent[-12:]
        if len(window) == 12 and max(window) - min(window) <= 1e-14 * (1.0 + abs(f)):
            reason = "stalled"
            break
    return theta, f, dist, step, it, reason


def rate_endpoint(spec: ModelSpec, ns: NoiseSpec, x0, target, delta_constraint: float, d: Discretization,
                  opts: RateOptions | None = None, theta0=None) -> RateResult:
    """inf 1/2 ||phi||^2 subject to ||z^{Q phi}_T - target||_H <= delta_constraint.

    Penalty continuation: minimize ``1/2||phi||^2 + rho * max(0, dist - delta)^2``
    by gradient descent with backtracking, rho growing geometrically over the
    rounds; up to ``extra_rounds`` further rounds run while the constraint is
    still violated. Returns an infinite value when the final violation exceeds
    ``constraint_tol``.
    """
    opts = opts or RateOptions()
    if delta_constraint < 0:
        raise ValueError("delta_constraint must be nonnegative")
    prob = _EndpointProblem(spec, ns, x0, target, delta_constraint, d, opts)
    theta = np.zeros(prob.nm * prob.nb) if theta0 is None else np.ravel(np.asarray(theta0, dtype=float)).copy()
    rho = opts.rho0
    step = 1.0
    total = 0
    history = []
    dist = math.nan
    residual = math.inf
    for rnd in range(opts.rounds + opts.extra_rounds):
        # extra rounds only run while the constraint is still violated
        if rnd >= opts.rounds and residual <= opts.constraint_tol:
            break
        theta, f, dist, step, its, reason = _descend(prob, theta, rho, opts, step)
        total += its
        history.append({"round": rnd, "rho": rho, "objective": f, "distance": dist,
                        "action": prob.action(theta), "iterations": its, "stop": reason})
        residual = max(0.0, dist - delta_constraint) if np.isfinite(dist) else math.inf
        rho *= opts.rho_factor
    if residual <= opts.constraint_tol:
        return RateResult(prob.action(theta), prob.control(theta), residual, total, True, history)
    return RateResult(math.inf, None, residual, total, False, history)


def rate_short_time(ns: NoiseSpec, x0, z: Trajectory, d: Discretization, range_tol: float = 1e-8,
                    start_tol: float = 1e-10) -> RateResult:
    """1/2 int sum_k (dz_k/dt / q_k)^2 dt for z_t = x0 + Q int_0^t phi; inf off the range of Q."""
    ns.check(d)
    x0 = check_field(x0, d)
    scale = max(1.0, float(np.max(np.abs(x0))))
    if np.max(np.abs(z.states[0] - x0)) > start_tol * scale:
        return RateResult(math.inf, None, float(norm_H(z.states[0] - x0, d)), 0, False)
    rates = np.diff(to_modes(z.states, d), axis=0) / d.dt  # (K, M)
    q = np.zeros(d.M)
    q[: ns.n_modes] = ns.array
    reachable = q > 0
    total = float(np.sum(rates**2))
    outside = float(np.sum(rates[:, ~reachable] ** 2))
    if total > 0 and outside > range_tol**2 * total:
        return RateResult(math.inf, None, math.sqrt(outside / total), 0, False)
    phi = np.zeros((d.K, ns.n_modes))
    phi[:, reachable[: ns.n_modes]] = rates[:, : ns.n_modes][:, reachable[: ns.n_modes]] / q[: ns.n_modes][reachable[: ns.n_modes]]
    ctrl = Control(phi, d.T)
    return RateResult(action(ctrl), ctrl, 0.0, 0, True)
