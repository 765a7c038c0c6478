"""
Monte Carlo experiments at desk scale: endpoint-ball probabilities and their
small-noise slope, exponential moments, approximation errors and the
short-time gap.

Paths are processed in fixed blocks of consecutive path indices. Each path
draws from its own counter-based stream and every solver row is independent,
so results do not depend on the block layout or on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from .model import ModelSpec
from .noise import NoiseSpec, WienerPath, sample_increments
from .solver import integrate, noise_forcing, pl_noise_forcing, sup_distance
from .spaces import Discretization, check_field, norm_H, norm_Lp

BLOCK = 250
BLOWUP_QUOTA = 0.01
MIN_HITS = 5


class BlowupError(RuntimeError):
    """More paths than the quota blew up or failed to solve."""


class InsufficientHitsError(ValueError):
    """Too few epsilon values produced enough hits for a slope fit."""


@dataclass(frozen=True)
class McEstimate:
    p_hat: float
    ci_low: float
    ci_high: float
    n_paths: int
    n_hits: int
    n_blowups: int = 0

    def __post_init__(self):
        if not 0 <= self.n_hits <= self.n_paths:
            raise ValueError("n_hits must lie in 0..n_paths")


@dataclass(frozen=True)
class SlopeFit:
    """Least-squares line of log p_hat against eps^-2."""

    slope: float
    intercept: float
    r_squared: float
    points: list[tuple[float, float]]
    estimates: list[McEstimate] = field(default_factory=list, repr=False)


def wilson_interval(hits: int, n: int, level: float = 0.95) -> tuple[float, float]:
    if n <= 0:
        raise ValueError("n must be positive")
    z = norm.ppf(0.5 + level / 2.0)
    p = hits / n
    denom = 1.0 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4 * n * n)) / denom
    # clamp so the interval always contains p_hat despite rounding
    return float(min(p, max(0.0, centre - half))), float(max(p, min(1.0, centre + half)))


def mc_estimate(hits: int, n: int, blowups: int = 0) -> McEstimate:
    lo, hi = wilson_interval(hits, n)
    return McEstimate(hits / n, lo, hi, n, hits, blowups)


def fit_line(xs, ys) -> tuple[float, float, float]:
    """Ordinary least squares ``y = slope*x + intercept``; returns (slope, intercept, r^2)."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    A = np.column_stack([xs, np.ones_like(xs)])
    (slope, intercept), *_ = np.linalg.lstsq(A, ys, rcond=None)
    ss_res = float(np.sum((ys - A @ np.array([slope, intercept])) ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), r2


def map_paths(fn, n_paths: int, workers: int = 1, block: int = BLOCK):
    """Apply ``fn(path_indices)`` to fixed index blocks and concatenate in order."""
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    blocks = [np.arange(s, min(s + block, n_paths)) for s in range(0, n_paths, block)]
    if workers <= 1 or len(blocks) == 1:
        parts = [fn(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(fn, blocks))
    return np.concatenate(parts, axis=0)


def _check_blowups(bad: np.ndarray, quota: float) -> int:
    n_bad = int(np.count_nonzero(bad))
    if n_bad > quota * bad.size:
        raise BlowupError(f"{n_bad} of {bad.size} paths blew up (quota {quota:.0%})")
    return n_bad


def simulate_paths(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, d: Discretization, seed: int,
                   path_indices, *, drift_scale: float = 1.0):
    """Stacked solutions for the given path indices: (states (P, K+1, M), ok (P,))."""
    inc = sample_increments(ns, d, seed, path_indices)
    res = integrate(spec, x0, noise_forcing(ns, inc, eps, d), d, drift_scale=drift_scale)
    return res.states, res.ok


def endpoint_distances(spec: ModelSpec, ns: NoiseSpec, x0, target, eps: float, d: Discretization,
                       n_paths: int, seed: int, *, workers: int = 1, drift_scale: float = 1.0) -> np.ndarray:
    """||X^eps_T - target||_H per path; NaN marks a failed path."""
    target = check_field(target, d)

    def block(idx):
        states, ok = simulate_paths(spec, ns, x0, eps, d, seed, idx, drift_scale=drift_scale)
        dist = norm_H(states[:, -1] - target, d)
        dist[~ok] = np.nan
        return dist

    return map_paths(block, n_paths, workers)


def estimate_ball_probability(spec: ModelSpec, ns: NoiseSpec, x0, target, delta: float, eps: float,
                              d: Discretization, n_paths: int, seed: int, *, workers: int = 1,
                              drift_scale: float = 1.0, blowup_quota: float = BLOWUP_QUOTA) -> McEstimate:
    """P(||X^eps_T - target||_H <= delta) with a Wilson 95% interval.

    Failed paths count as misses and are reported in ``n_blowups``; more
    than ``blowup_quota`` of them raises BlowupError.
    """
    if n_paths < 100:
        raise ValueError("n_paths must be at least 100")
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    dist = endpoint_distances(spec, ns, x0, target, eps, d, n_paths, seed, workers=workers,
                              drift_scale=drift_scale)
    bad = np.isnan(dist)
    n_bad = _check_blowups(bad, blowup_quota)
    # a closed ball of radius 0 is still a null event for a continuous law
    hits = int(np.count_nonzero(dist[~bad] <= delta)) if delta > 0 else 0
    return mc_estimate(hits, n_paths, n_bad)


def ldp_slope(spec: ModelSpec, ns: NoiseSpec, x0, target, delta: float, eps_list, d: Discretization,
              n_paths: int, seed: int, *, workers: int = 1, drift_scale: float = 1.0) -> SlopeFit:
    """Fit log p_hat against eps^-2; the slope estimates -inf of the rate over the ball.

    Each epsilon uses its own seed offset so the estimates are independent.
    """
    points, estimates = [], []
    for i, eps in enumerate(eps_list):
        est = estimate_ball_probability(spec, ns, x0, target, delta, eps, d, n_paths, seed + i,
                                        workers=workers, drift_scale=drift_scale)
        estimates.append(est)
        if est.n_hits >= MIN_HITS:
            points.append((float(eps), math.log(est.p_hat)))
    if len(points) < 3:
        raise InsufficientHitsError(
            f"only {len(points)} epsilon values reached {MIN_HITS} hits; increase delta or epsilon"
        )
    slope, intercept, r2 = fit_line([e**-2 for e, _ in points], [lp for _, lp in points])
    return SlopeFit(slope, intercept, r2, points, estimates)


def time_integral_Lp(states, p: float, d: Discretization) -> np.ndarray:
    """int_0^T ||X_t||_p^p dt by the trapezoidal rule, per path."""
    vals = norm_Lp(states, p, d) ** p
    return d.dt * (np.sum(vals, axis=-1) - 0.5 * (vals[..., 0] + vals[..., -1]))


def check_exp_estimate(spec: ModelSpec, ns: NoiseSpec, x0, gamma: float, eps_list, d: Discretization,
                       n_paths: int, seed: int, *, workers: int = 1,
                       blowup_quota: float = BLOWUP_QUOTA) -> list[tuple[float, float]]:
    """e_hat(eps) = eps^2 log mean exp(gamma eps^-2 int ||X||_{r+1}^{r+1}), via log-sum-exp."""
    if gamma < 0:
        raise ValueError("gamma must be nonnegative")
    out = []
    for i, eps in enumerate(eps_list):
        if eps <= 0:
            raise ValueError("eps must be positive")

        def block(idx, eps=eps, i=i):
            states, ok = simulate_paths(spec, ns, x0, eps, d, seed + i, idx)
            vals = np.full(len(idx), np.nan)
            vals[ok] = time_integral_Lp(states[ok], spec.r + 1.0, d)
            return vals

        vals = map_paths(block, n_paths, workers)
        bad = np.isnan(vals)
        _check_blowups(bad, blowup_quota)
        expo = (gamma / eps**2) * vals[~bad]
        e_hat = eps**2 * (float(logsumexp(expo)) - math.log(expo.size))
        out.append((float(eps), e_hat))
    return out


def coupled_distances(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, increments, n_list, N_list,
                      d: Discretization) -> dict:
    """sup-H distances between approximations driven by one set of increments.

    Returns ``{("N", n, N): ...}`` for ||X^{eps,n} - X^{eps,n}_N|| and
    ``{("n", n): ...}`` for ||X^{eps,n} - X^eps||, each an array over paths
    (NaN where either solve failed).
    """
    inc = np.asarray(increments)
    full = integrate(spec, x0, noise_forcing(ns, inc, eps, d), d)
    out = {}
    for n in n_list:
        tns = ns.truncated(n)
        proj = integrate(spec, x0, noise_forcing(tns, inc, eps, d), d)
        dist = sup_distance(proj.states, full.states, d)
        dist[~(proj.ok & full.ok)] = np.nan
        out[("n", n)] = dist
        for N in N_list:
            pl = integrate(spec, x0, pl_noise_forcing(tns, inc, eps, N, d), d)
            dist = sup_distance(proj.states, pl.states, d)
            dist[~(proj.ok & pl.ok)] = np.nan
            out[("N", n, N)] = dist
    return out


def coupled_path_distances(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, w: WienerPath, n: int, N: int,
                           d: Discretization) -> tuple[float, float]:
    """Both approximation distances for a single Wiener path: (||X^n - X^n_N||, ||X^n - X||)."""
    dist = coupled_distances(spec, ns, x0, eps, w.increments[None], [n], [N], d)
    return float(dist[("N", n, N)][0]), float(dist[("n", n)][0])


@dataclass(frozen=True)
class ApproxRow:
    kind: str  # "N": piecewise-linear noise vs projected; "n": projected vs full
    n: int
    N: int  # 0 for the "n" rows
    estimate: McEstimate
    median_distance: float


def approx_error_probabilities(spec: ModelSpec, ns: NoiseSpec, x0, eps: float, delta: float, n_list, N_list,
                               d: Discretization, n_paths: int, seed: int, *, workers: int = 1,
                               blowup_quota: float = BLOWUP_QUOTA) -> list[ApproxRow]:
    """Exceedance probabilities of the coupled approximation distances over delta."""
    n_list, N_list = list(n_list), list(N_list)
    if not n_list or not N_list:
        raise ValueError("n_list and N_list must be nonempty")
    for n in n_list:
        if not 1 <= n <= ns.n_modes:
            raise ValueError(f"n = {n} outside 1..{ns.n_modes}")
    for N in N_list:
        if N < 1 or d.K % N:
            raise ValueError(f"N = {N} must divide K = {d.K}")
    keys = [("N", n, N) for n in n_list for N in N_list] + [("n", n) for n in n_list]

    def block(idx):
        inc = sample_increments(ns, d, seed, idx)
        dist = coupled_distances(spec, ns, x0, eps, inc, n_list, N_list, d)
        return np.column_stack([dist[k] for k in keys])

    table = map_paths(block, n_paths, workers)
    rows = []
    for j, key in enumerate(keys):
        col = table[:, j]
        bad = np.isnan(col)
        n_bad = _check_blowups(bad, blowup_quota)
        hits = int(np.count_nonzero(col[~bad] > delta)) + n_bad
        est = mc_estimate(hits, n_paths, n_bad)
        N = key[2] if key[0] == "N" else 0
        rows.append(ApproxRow(key[0], key[1], N, est, float(np.median(col[~bad]))))
    return rows


@dataclass(frozen=True)
class GapRow:
    eps: float
    q50: float
    q90: float
    q99: float

    @property
    def ratio90(self) -> float:
        return self.q90 / self.eps if self.eps > 0 else 0.0


def short_time_gap(spec: ModelSpec, ns: NoiseSpec, x0, eps_list, d: Discretization, n_paths: int, seed: int,
                   *, workers: int = 1, tube: bool = True, drift_scale: float | None = None,
                   blowup_quota: float = BLOWUP_QUOTA) -> list[GapRow]:
    """Quantiles of ||X~^eps - x0 - eps Q W~||_H per epsilon.

    X~ solves the time-rescaled equation (drift times eps^2). With ``tube``
    the distance is the sup over the time grid, otherwise at T only.
    ``drift_scale`` overrides the eps^2 multiplier.
    """
    x0 = check_field(x0, d)
    rows = []
    for i, eps in enumerate(eps_list):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        s = eps**2 if drift_scale is None else drift_scale

        def block(idx, eps=eps, s=s, i=i):
            inc = sample_increments(ns, d, seed + i, idx)
            forcing = noise_forcing(ns, inc, eps, d)
            res = integrate(spec, x0, forcing, d, drift_scale=s)
            # accumulate in the solver's order so a zero drift gives a zero gap exactly
            free = np.empty_like(res.states)
            free[:, 0] = x0
            for k in range(d.K):
                free[:, k + 1] = free[:, k] + forcing[:, k]
            if tube:
                gap = sup_distance(res.states, free, d)
            else:
                gap = norm_H(res.states[:, -1] - free[:, -1], d)
            gap[~res.ok] = np.nan
            return gap

        gaps = map_paths(block, n_paths, workers)
        bad = np.isnan(gaps)
        _check_blowups(bad, blowup_quota)
        q50, q90, q99 = np.quantile(gaps[~bad], [0.5, 0.9, 0.99])
        rows.append(GapRow(float(eps), float(q50), float(q90), float(q99)))
    return rows
