"""
Nonlinearities Psi, Phi and the drift b = L Psi + Phi.

Coefficients are deterministic and time independent. The default model is the
classical porous medium nonlinearity ``Psi(s) = theta1 |s|^(r-1) s`` with a
linear reaction ``Phi(s) = sigma s``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .spaces import Discretization, apply_L, check_field, inner, norm_H, norm_Lp, solve_neg_L


class PsiForm(str, enum.Enum):
    POWER_LAW = "power-law"


class PhiForm(str, enum.Enum):
    LINEAR = "linear"
    POWER_PLUS_LINEAR = "power-plus-linear"


@dataclass(frozen=True)
class ModelSpec:
    r: float = 3.0
    theta1: float = 1.0
    theta2: float = 0.0
    sigma: float = 0.1
    psi_form: PsiForm = PsiForm.POWER_LAW
    phi_form: PhiForm = PhiForm.LINEAR

    def __post_init__(self):
        if not self.r > 1:
            raise ValueError(f"r must exceed 1, got {self.r}")
        if not self.theta1 > 0:
            raise ValueError(f"theta1 must be positive, got {self.theta1}")
        if self.theta2 < 0 or self.sigma < 0:
            raise ValueError("theta2 and sigma must be nonnegative")
        object.__setattr__(self, "psi_form", PsiForm(self.psi_form))
        object.__setattr__(self, "phi_form", PhiForm(self.phi_form))

    @property
    def coercivity(self) -> float:
        """Constant in ``(s-t)(Psi(s)-Psi(t)) >= c |s-t|^(r+1)``; sharp for the power law."""
        return 2.0 ** (1.0 - self.r) * self.theta1


def _signed_power(s: np.ndarray, r: float) -> np.ndarray:
    a = np.abs(s)
    if float(r - 1).is_integer():
        # repeated products are exactly reproducible; pow() is not guaranteed to be
        out = s.copy()
        for _ in range(int(r - 1)):
            out = out * a
        return out
    return a ** (r - 1) * s


def psi(spec: ModelSpec, s):
    s = np.asarray(s, dtype=float)
    return spec.theta1 * _signed_power(s, spec.r)


def dpsi(spec: ModelSpec, s, eta: float = 0.0):
    """Psi'(s) = r theta1 (|s| + eta)^(r-1); ``eta`` regularizes r < 2 at s = 0."""
    s = np.asarray(s, dtype=float)
    return spec.r * spec.theta1 * (np.abs(s) + eta) ** (spec.r - 1)


def phi(spec: ModelSpec, s):
    s = np.asarray(s, dtype=float)
    out = spec.sigma * s
    if spec.phi_form is PhiForm.POWER_PLUS_LINEAR:
        out = out + spec.theta2 * _signed_power(s, spec.r)
    return out


def drift(spec: ModelSpec, f, d: Discretization) -> np.ndarray:
    """b(f) = L Psi(f) + Phi(f) on the grid; raises OverflowError instead of returning inf."""
    f = check_field(f, d)
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = apply_L(psi(spec, f), d) + phi(spec, f)
        except FloatingPointError as exc:
            raise OverflowError(f"drift overflow for max|f| = {np.max(np.abs(f)):.3g}") from exc
    if not np.all(np.isfinite(out)):
        raise OverflowError(f"drift overflow for max|f| = {np.max(np.abs(f)):.3g}")
    return out


def linv_norm_lp(p: float, d: Discretization, rng: np.random.Generator, samples: int = 200,
                 iters: int = 100) -> float:
    """Estimate the operator norm of (-L)^{-1} on L^p(m).

    Takes the best of random fields, sine modes, and a nonlinear power
    iteration (Boyd's method; (-L)^{-1} has a positive kernel so it converges
    to the maximizer). The quadrature weight cancels in the ratio.
    """
    q = p / (p - 1.0) if p > 1 else np.inf

    def ratio(f):
        return norm_Lp(solve_neg_L(f, d), p, d) / norm_Lp(f, p, d)

    cands = [rng.standard_normal((samples, d.M)), d.basis[: min(d.M, 8)], np.ones((1, d.M))]
    best = max(float(np.max(ratio(c))) for c in cands)

    if np.isfinite(q):
        x = np.ones(d.M)
        x /= norm_Lp(x, p, d)
        for _ in range(iters):
            y = solve_neg_L(x, d)
            z = solve_neg_L(np.abs(y) ** (p - 1) * np.sign(y), d)
            x_new = np.abs(z) ** (q - 1) * np.sign(z)
            x_new /= norm_Lp(x_new, p, d)
            if np.max(np.abs(x_new - x)) < 1e-13:
                x = x_new
                break
            x = x_new
        best = max(best, float(ratio(x)))
    return best


@dataclass
class ConditionReport:
    empirical_theta1: float
    empirical_lip: tuple[float, float]
    monotonicity_alpha_hat: float
    monotonicity_c_hat: float
    samples: int
    pass_: bool
    linv_norm: float = float("nan")
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.pass_


def _mixed_scale(rng, size):
    return rng.choice([-1.0, 1.0], size=size) * 10.0 ** rng.uniform(-2.0, 2.0, size=size)


def validate_model(spec: ModelSpec, d: Discretization, sample_count: int,
                   rng: np.random.Generator, scalar_count: int | None = None,
                   slack: float = 0.05) -> ConditionReport:
    """Empirically check the structural conditions on (Psi, Phi).

    Scalar pairs test the coercivity of Psi and the Lipschitz-type bound on
    Phi; Field pairs fit the smallest dissipativity pair ``(alpha, c)`` with
    ``<u-v, b(u)-b(v)>_H <= -alpha ||u-v||_{r+1}^{r+1} + c ||u-v||_H^2``.
    A failing model yields ``pass_ = False`` with the violated inequality named.
    """
    if sample_count < 100:
        raise ValueError("sample_count must be at least 100")
    scalar_count = 10 * sample_count if scalar_count is None else scalar_count
    r = spec.r
    failures = []

    s = _mixed_scale(rng, scalar_count)
    t = _mixed_scale(rng, scalar_count)
    # half the pairs straddle zero symmetrically, where the power-law bound is tight
    half = scalar_count // 2
    t[:half] = -s[:half] * (1.0 + 1e-3 * rng.standard_normal(half))
    ds = s - t
    keep = np.abs(ds) > 1e-12 * (np.abs(s) + np.abs(t))
    s, t, ds = s[keep], t[keep], ds[keep]
    adiff = np.abs(ds)

    theta1_hat = float(np.min(ds * (psi(spec, s) - psi(spec, t)) / adiff ** (r + 1)))
    if theta1_hat < (1.0 - slack) * spec.coercivity:
        failures.append(
            f"Psi coercivity: (s-t)(Psi(s)-Psi(t)) >= {spec.coercivity:.6g}|s-t|^(r+1) "
            f"violated (worst ratio {theta1_hat:.6g})"
        )

    dphi = np.abs(phi(spec, s) - phi(spec, t))
    round_guard = 1e-12 * (dphi + spec.sigma * adiff + spec.theta2 * adiff**r)
    theta2_hat = float(np.max(np.maximum(dphi - spec.sigma * adiff - round_guard, 0.0) / adiff**r))
    sigma_hat = float(np.max(np.maximum(dphi - spec.theta2 * adiff**r - round_guard, 0.0) / adiff))
    if theta2_hat > (1.0 + slack) * spec.theta2 + 1e-12:
        failures.append(
            f"Phi bound: |Phi(s)-Phi(t)| <= theta2|s-t|^r + sigma|s-t| needs theta2 >= "
            f"{theta2_hat:.6g} (declared {spec.theta2:.6g})"
        )
    if sigma_hat > (1.0 + slack) * spec.sigma + 1e-12:
        failures.append(
            f"Phi bound: |Phi(s)-Phi(t)| <= theta2|s-t|^r + sigma|s-t| needs sigma >= "
            f"{sigma_hat:.6g} (declared {spec.sigma:.6g})"
        )

    B = linv_norm_lp(r + 1.0, d, rng)
    if not spec.coercivity > (1.0 + slack) * spec.theta2 * B:
        failures.append(
            f"admissibility gate: coercivity {spec.coercivity:.6g} must exceed "
            f"theta2 * ||L^-1||_(r+1) = {spec.theta2:.6g} * {B:.6g}"
        )

    scale = 10.0 ** rng.uniform(-2.0, 2.0, size=(sample_count, 1))
    u = scale * rng.standard_normal((sample_count, d.M))
    scale = 10.0 ** rng.uniform(-2.0, 2.0, size=(sample_count, 1))
    v = u + scale * rng.standard_normal((sample_count, d.M))
    w = u - v
    psi_part = inner(w, psi(spec, u) - psi(spec, v), d)
    phi_part = inner(solve_neg_L(w, d), phi(spec, u) - phi(spec, v), d)
    pairing = -psi_part + phi_part
    a = norm_Lp(w, r + 1.0, d) ** (r + 1.0)
    b = norm_H(w, d) ** 2
    alpha_hat = 0.5 * float(np.min(psi_part / a))
    c_hat = max(0.0, float(np.max((pairing + alpha_hat * a) / b)))
    if not alpha_hat > 0:
        failures.append(f"dissipativity: no positive alpha (alpha_hat = {alpha_hat:.6g})")
    if not np.isfinite(c_hat):
        failures.append("dissipativity: c_hat is not finite")

    return ConditionReport(
        empirical_theta1=theta1_hat,
        empirical_lip=(theta2_hat, sigma_hat),
        monotonicity_alpha_hat=alpha_hat,
        monotonicity_c_hat=c_hat,
        samples=sample_count,
        pass_=not failures,
        linv_norm=B,
        failures=failures,
    )
