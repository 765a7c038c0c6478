"""
Command line entry point: ``pmldp run`` and ``pmldp describe``.

Exit codes: 0 success, 1 validation failure (bad config, model failing its
structural checks), 2 numerical failure (blow-up quota, infeasible
optimizer, solver abort, too few hits for a slope).
"""

from __future__ import annotations

import csv
import io
import math
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load, serialize
from .harness import (BlowupError, InsufficientHitsError, approx_error_probabilities, check_exp_estimate,
                      ldp_slope, short_time_gap)
from .model import linv_norm_lp, validate_model
from .noise import Control, hs_norm_sq, sample_path
from .rate import RateOptions, rate_endpoint
from .solver import SolverError, integrate, solve_skeleton, solve_spde
from .spaces import mode_field

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2
DEGENERATE_WARNING = "degenerate noise: rate functionals infinite off the deterministic path"


class NumericalFailure(RuntimeError):
    """Raised after output is written when the run must exit with code 2."""


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def format_csv(cfg: ExperimentConfig, columns, rows) -> str:
    """Manifest comment lines, then an RFC-4180 header and body."""
    buf = io.StringIO()
    buf.write(f"# version: pmldp {__version__}\n")
    buf.write(f"# experiment: {cfg.experiment.kind}\n")
    buf.write(f"# config-hash: {cfg.config_hash()}\n")
    buf.write(f"# seed: {cfg.run.seed}\n")
    buf.write(f"# columns: {','.join(columns)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def read_csv(path) -> tuple[dict, list[str], list[list[str]]]:
    """Parse an output file back into (manifest, header, rows)."""
    manifest, body = {}, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            manifest[key.strip()] = value.strip()
        else:
            body.append(line)
    records = list(csv.reader(body))
    return manifest, records[0], records[1:]


def csv_body(text: str) -> str:
    return "".join(line for line in text.splitlines(keepends=True) if not line.startswith("#"))


def _planted_control(cfg: ExperimentConfig) -> Control:
    d, ns = cfg.disc(), cfg.noise_spec()
    coeffs = np.zeros((d.K, ns.n_modes))
    for k, a in cfg.experiment.control:
        coeffs[:, k - 1] += a
    return Control(coeffs, d.T)


def _target(cfg: ExperimentConfig) -> np.ndarray:
    ec = cfg.experiment
    d = cfg.disc()
    if ec.target:
        return mode_field(ec.target, d)
    traj = solve_skeleton(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), _planted_control(cfg), d,
                          drift_scale=ec.drift_scale)
    return traj.states[-1]


def _field_columns(d):
    return [f"x_{j}" for j in range(1, d.M + 1)]


def _run_simulate(cfg, workers):
    d, ec = cfg.disc(), cfg.experiment
    ns = cfg.noise_spec()
    rows = []
    for i, eps in enumerate(ec.eps):
        w = sample_path(ns, d, cfg.run.seed + i, ec.path_index)
        traj = solve_spde(cfg.model_spec(), ns, cfg.x0(), eps, w, d, drift_scale=ec.drift_scale)
        rows += [[eps, t, *x] for t, x in zip(d.times, traj.states)]
    return ["eps", "t", *_field_columns(d)], rows, None


def _run_skeleton(cfg, workers):
    d = cfg.disc()
    traj = solve_skeleton(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), _planted_control(cfg), d,
                          drift_scale=cfg.experiment.drift_scale)
    return ["t", *_field_columns(d)], [[t, *x] for t, x in zip(d.times, traj.states)], None


def _rate(cfg, delta):
    ec = cfg.experiment
    opts = RateOptions(n_ctrl_modes=ec.n_ctrl_modes, n_ctrl_times=ec.n_ctrl_times, drift_scale=ec.drift_scale)
    return rate_endpoint(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), _target(cfg), delta, cfg.disc(), opts)


def _run_rate(cfg, workers):
    res = _rate(cfg, cfg.experiment.delta)
    rows = [["value", None, None, res.value], ["residual", None, None, res.residual],
            ["iterations", None, None, res.iterations], ["feasible", None, None, res.feasible]]
    if res.argmin is not None:
        for i, step in enumerate(res.argmin.coeffs):
            rows += [["coeff", i, k + 1, c] for k, c in enumerate(step)]
    failure = None if res.feasible else f"optimizer infeasible: residual {res.residual:.3g}"
    return ["field", "step", "mode", "value"], rows, failure


def _run_ldp_slope(cfg, workers):
    ec = cfg.experiment
    fit = ldp_slope(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), _target(cfg), ec.delta, ec.eps, cfg.disc(),
                    ec.n_paths, cfg.run.seed, workers=workers, drift_scale=ec.drift_scale)
    columns = ["record", "eps", "n_paths", "n_hits", "n_blowups", "p_hat", "ci_low", "ci_high", "value",
               "intercept", "r_squared"]
    rows = [["point", eps, e.n_paths, e.n_hits, e.n_blowups, e.p_hat, e.ci_low, e.ci_high,
             math.log(e.p_hat) if e.n_hits else None, None, None]
            for eps, e in zip(ec.eps, fit.estimates)]
    rows.append(["slope", None, None, None, None, None, None, None, fit.slope, fit.intercept, fit.r_squared])
    failure = None
    if ec.compare_rate:
        res = _rate(cfg, ec.delta)
        rows.append(["rate", None, None, None, None, None, None, None, res.value, None, None])
        if not res.feasible:
            failure = f"optimizer infeasible: residual {res.residual:.3g}"
    return columns, rows, failure


def _run_exp_estimate(cfg, workers):
    ec = cfg.experiment
    rows = []
    for j, gamma in enumerate(ec.gamma):
        out = check_exp_estimate(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), gamma, ec.eps, cfg.disc(),
                                 ec.n_paths, cfg.run.seed + 1000 * j, workers=workers)
        rows += [[gamma, eps, e_hat] for eps, e_hat in out]
    return ["gamma", "eps", "e_hat"], rows, None


def _run_approx(cfg, workers):
    ec = cfg.experiment
    rows = []
    for i, eps in enumerate(ec.eps):
        table = approx_error_probabilities(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), eps, ec.delta, ec.n_list,
                                           ec.N_list, cfg.disc(), ec.n_paths, cfg.run.seed + i, workers=workers)
        rows += [[eps, r.kind, r.n, r.N, r.estimate.n_paths, r.estimate.n_hits, r.estimate.n_blowups,
                  r.estimate.p_hat, r.estimate.ci_low, r.estimate.ci_high, r.median_distance] for r in table]
    columns = ["eps", "comparison", "n", "N", "n_paths", "n_hits", "n_blowups", "p_hat", "ci_low", "ci_high",
               "median_distance"]
    return columns, rows, None


def _run_short_time(cfg, workers):
    ec = cfg.experiment
    table = short_time_gap(cfg.model_spec(), cfg.noise_spec(), cfg.x0(), ec.eps, cfg.disc(), ec.n_paths,
                           cfg.run.seed, workers=workers, tube=ec.tube)
    return (["eps", "q50", "q90", "q99", "ratio90"],
            [[r.eps, r.q50, r.q90, r.q99, r.ratio90] for r in table], None)


class ModelInvalid(Exception):
    pass


def _run_validate(cfg, workers):
    ec = cfg.experiment
    rep = validate_model(cfg.model_spec(), cfg.disc(), ec.n_paths, np.random.default_rng(cfg.run.seed))
    rows = [["empirical_theta1", rep.empirical_theta1], ["empirical_theta2", rep.empirical_lip[0]],
            ["empirical_sigma", rep.empirical_lip[1]], ["alpha_hat", rep.monotonicity_alpha_hat],
            ["c_hat", rep.monotonicity_c_hat], ["linv_norm", rep.linv_norm], ["samples", rep.samples],
            ["pass", rep.pass_]]
    rows += [["failure", msg] for msg in rep.failures]
    return ["quantity", "value"], rows, ModelInvalid("; ".join(rep.failures)) if rep.failures else None


RUNNERS = {
    "simulate": _run_simulate,
    "skeleton": _run_skeleton,
    "rate": _run_rate,
    "ldp-slope": _run_ldp_slope,
    "exp-estimate": _run_exp_estimate,
    "approx-errors": _run_approx,
    "short-time": _run_short_time,
    "validate-model": _run_validate,
}


def run_experiment(cfg: ExperimentConfig, workers: int = 1) -> tuple[str, object]:
    """Run the configured experiment; returns (csv text, failure or None)."""
    cfg.noise_spec().check(cfg.disc())
    columns, rows, failure = RUNNERS[cfg.experiment.kind](cfg, workers)
    return format_csv(cfg, columns, rows), failure


def describe_text(cfg: ExperimentConfig) -> str:
    d, ns, spec, ec = cfg.disc(), cfg.noise_spec(), cfg.model_spec(), cfg.experiment
    lines = ["resolved configuration:", serialize(cfg).rstrip(), ""]
    lines.append(f"lambda0 = {d.lambda0!r}  (2/h^2 (1 - cos(pi h)), h = {d.h!r})")
    lines.append(f"q(Q) = {hs_norm_sq(ns, d)!r}")
    B = linv_norm_lp(spec.r + 1.0, d, np.random.default_rng(0))
    gate = spec.coercivity > spec.theta2 * B
    lines.append(f"admissibility gate: {'pass' if gate else 'FAIL'}  "
                 f"(2^(1-r) theta1 = {spec.coercivity:.6g} vs theta2 * ||L^-1||_(r+1) = {spec.theta2 * B:.6g})")
    # Newton iterations per step, from the noise-free run out of x0
    res = integrate(spec, cfg.x0(), np.zeros((1, d.K, d.M)), d, drift_scale=ec.drift_scale)
    newton = max(1.0, float(res.newton_iters[0]) / d.K)
    paths = _path_count(cfg)
    lines.append(f"estimated cost: {paths} paths x {d.K} steps x {newton:.2f} Newton iterations "
                 f"= {paths * d.K * newton:.3g} tridiagonal solves")
    if not np.any(ns.array > 0):
        lines.append(f"warning: {DEGENERATE_WARNING}")
    return "\n".join(lines)


def _path_count(cfg: ExperimentConfig) -> int:
    ec = cfg.experiment
    kind = ec.kind
    if kind == "simulate":
        return len(ec.eps)
    if kind in ("skeleton", "validate-model"):
        return 1
    if kind == "rate":
        return 4000 * (2 * ec.n_ctrl_modes * ec.n_ctrl_times + 2)
    if kind == "approx-errors":
        return len(ec.eps) * ec.n_paths * (1 + len(ec.n_list) * (1 + len(ec.N_list)))
    if kind == "exp-estimate":
        return len(ec.gamma) * len(ec.eps) * ec.n_paths
    return len(ec.eps) * ec.n_paths


@click.group()
@click.version_option(__version__, prog_name="pmldp")
def main():
    """Large-deviation laboratory for stochastic porous media equations."""


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override a config value.")
@click.option("--workers", default=1, show_default=True, type=click.IntRange(min=1), help="Worker threads.")
@click.option("--seed", type=int, default=None, help="Override [run] seed.")
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Override [run] output.")
def run(config, overrides, workers, seed, out):
    """Run the experiment described by CONFIG and write a CSV."""
    overrides = list(overrides)
    if seed is not None:
        overrides.append(f"run.seed={seed}")
    if out is not None:
        overrides.append(f"run.output={out}")
    try:
        cfg = load(config, overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    try:
        text, failure = run_experiment(cfg, workers)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, InsufficientHitsError):
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(EXIT_NUMERIC)
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    except (BlowupError, SolverError, OverflowError) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERIC)
    Path(cfg.run.output).write_text(text)
    click.echo(f"wrote {cfg.run.output}")
    if isinstance(failure, ModelInvalid):
        click.echo(f"model validation failed: {failure}", err=True)
        sys.exit(EXIT_INVALID)
    if failure:
        click.echo(f"numerical failure: {failure}", err=True)
        sys.exit(EXIT_NUMERIC)
    sys.exit(EXIT_OK)


@main.command()
@click.argument("config", type=click.Path(dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="SECTION.KEY=VALUE", help="Override a config value.")
def describe(config, overrides):
    """Print resolved parameters, lambda0, q(Q), the gate status and a cost estimate."""
    try:
        cfg = load(config, overrides)
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_INVALID)
    click.echo(describe_text(cfg))


if __name__ == "__main__":
    main()
