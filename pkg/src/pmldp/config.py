"""
Experiment configuration: a sectioned INI file read with ``configparser``.

Grammar (every key optional unless noted; unknown sections or keys are errors)::

    [discretization]   M (int >= 3), K (int), T (float)
    [model]            r, theta1, theta2, sigma (floats); psi_form, phi_form
    [noise]            q = 1.0, 0.5, ...      explicit multipliers, or
                       beta, n_modes, scale   q_k = scale * k^-beta
    [experiment]       kind (required), eps, delta, n_paths, x0, target, control,
                       gamma, n_list, N_list, drift_scale, tube, path_index,
                       n_ctrl_modes, n_ctrl_times, compare_rate
    [run]              seed, output

Lists are comma separated. Fields (x0, target) and constant-in-time controls
are finite mode expansions ``k:coefficient, k:coefficient``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelSpec, PhiForm, PsiForm
from .noise import NoiseSpec
from .spaces import Discretization, mode_field

KINDS = ("simulate", "skeleton", "rate", "ldp-slope", "exp-estimate", "approx-errors", "short-time",
         "validate-model")
NEEDS_EPS = ("simulate", "ldp-slope", "exp-estimate", "approx-errors", "short-time")
MC_KINDS = ("ldp-slope",)


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


# value codecs: (parse, format)

def _floats(s):
    return tuple(float(v) for v in s.split(",") if v.strip())


def _ints(s):
    return tuple(int(v) for v in s.split(",") if v.strip())


def _modes(s):
    out = []
    for item in s.split(","):
        if not item.strip():
            continue
        k, _, c = item.partition(":")
        if not _:
            raise ValueError(f"mode term {item.strip()!r} is not of the form k:coefficient")
        out.append((int(k), float(c)))
    return tuple(out)


def _bool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt(parse):
    return lambda s: None if s.strip().lower() in ("", "none") else parse(s)


CODECS = {
    "int": (int, str),
    "float": (float, repr),
    "str": (str.strip, str),
    "bool": (_bool, lambda v: "true" if v else "false"),
    "floats": (_floats, lambda v: ", ".join(repr(x) for x in v)),
    "ints": (_ints, lambda v: ", ".join(str(x) for x in v)),
    "modes": (_modes, lambda v: ", ".join(f"{k}:{c!r}" for k, c in v)),
    "optfloat": (_opt(float), lambda v: "none" if v is None else repr(v)),
    "optint": (_opt(int), lambda v: "none" if v is None else str(v)),
    "optfloats": (_opt(_floats), lambda v: "none" if v is None else ", ".join(repr(x) for x in v)),
}


def _f(kind, default):
    if isinstance(default, (list, dict)):
        raise TypeError("use tuples for defaults")
    return field(default=default, metadata={"codec": kind})


@dataclass(frozen=True)
class DiscretizationConfig:
    M: int = _f("int", 31)
    K: int = _f("int", 100)
    T: float = _f("float", 1.0)


@dataclass(frozen=True)
class ModelConfig:
    r: float = _f("float", 3.0)
    theta1: float = _f("float", 1.0)
    theta2: float = _f("float", 0.0)
    sigma: float = _f("float", 0.1)
    psi_form: str = _f("str", PsiForm.POWER_LAW.value)
    phi_form: str = _f("str", PhiForm.LINEAR.value)


@dataclass(frozen=True)
class NoiseConfig:
    q: tuple | None = _f("optfloats", None)
    beta: float = _f("float", 1.0)
    n_modes: int = _f("int", 4)
    scale: float = _f("float", 1.0)


@dataclass(frozen=True)
class ExperimentSection:
    kind: str = _f("str", "")
    eps: tuple = _f("floats", ())
    delta: float = _f("float", 0.1)
    n_paths: int = _f("int", 1000)
    x0: tuple = _f("modes", ())
    target: tuple = _f("modes", ())
    control: tuple = _f("modes", ())
    gamma: tuple = _f("floats", (1e-2,))
    n_list: tuple = _f("ints", (1,))
    N_list: tuple = _f("ints", (1,))
    drift_scale: float = _f("float", 1.0)
    tube: bool = _f("bool", True)
    path_index: int = _f("int", 0)
    n_ctrl_modes: int = _f("int", 3)
    n_ctrl_times: int = _f("int", 8)
    compare_rate: bool = _f("bool", False)


@dataclass(frozen=True)
class RunConfig:
    seed: int = _f("int", 0)
    output: str = _f("str", "out.csv")


SECTIONS = {
    "discretization": DiscretizationConfig,
    "model": ModelConfig,
    "noise": NoiseConfig,
    "experiment": ExperimentSection,
    "run": RunConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    discretization: DiscretizationConfig = field(default_factory=DiscretizationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    run: RunConfig = field(default_factory=RunConfig)

    # derived objects

    def disc(self) -> Discretization:
        c = self.discretization
        return Discretization(c.M, c.T, c.K)

    def model_spec(self) -> ModelSpec:
        c = self.model
        return ModelSpec(c.r, c.theta1, c.theta2, c.sigma, c.psi_form, c.phi_form)

    def noise_spec(self) -> NoiseSpec:
        c = self.noise
        if c.q is not None:
            return NoiseSpec(c.q)
        return NoiseSpec.from_decay(c.beta, c.n_modes, c.scale)

    def x0(self) -> np.ndarray:
        return mode_field(self.experiment.x0, self.disc())

    def config_hash(self) -> str:
        """sha256 of the canonical text, ignoring the output path."""
        canon = dataclasses.replace(self, run=dataclasses.replace(self.run, output=""))
        return hashlib.sha256(serialize(canon).encode()).hexdigest()


def serialize(cfg: ExperimentConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: CODECS[f.metadata["codec"]][1](getattr(sec, f.name)) for f in dataclasses.fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def _parse_value(section: str, key: str, raw: str):
    cls = SECTIONS[section]
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown key [{section}] {key} (allowed: {', '.join(fields)})")
    try:
        return CODECS[fields[key].metadata["codec"]][0](raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def parse(text: str, overrides=()) -> ExperimentConfig:
    """Parse INI text, apply ``section.key=value`` overrides, and validate."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    values = {name: {} for name in SECTIONS}
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] (allowed: {', '.join(SECTIONS)})")
        for key, raw in cp[section].items():
            values[section][key] = _parse_value(section, key, raw)
    for item in overrides:
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in override {item!r}")
        values[section][key] = _parse_value(section, key, raw)
    cfg = ExperimentConfig(**{name: SECTIONS[name](**values[name]) for name in SECTIONS})
    validate(cfg)
    return cfg


def load(path, overrides=()) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse(p.read_text(), overrides)


def validate(cfg: ExperimentConfig) -> None:
    """Fail fast on inconsistent parameters, before any computation."""
    dc, mc, nc, ec = cfg.discretization, cfg.model, cfg.noise, cfg.experiment
    errors = []
    if dc.M < 3:
        errors.append(f"M = {dc.M} must be at least 3")
    if dc.K < 1:
        errors.append(f"K = {dc.K} must be positive")
    if not dc.T > 0:
        errors.append(f"T = {dc.T} must be positive")
    if not mc.r > 1:
        errors.append(f"r = {mc.r} must exceed 1")
    if not mc.theta1 > 0:
        errors.append(f"theta1 = {mc.theta1} must be positive")
    if mc.theta2 < 0 or mc.sigma < 0:
        errors.append("theta2 and sigma must be nonnegative")
    for name, enum in (("psi_form", PsiForm), ("phi_form", PhiForm)):
        value = getattr(mc, name)
        if value not in {e.value for e in enum}:
            errors.append(f"{name} = {value!r} not one of {', '.join(e.value for e in enum)}")
    n_modes = len(nc.q) if nc.q is not None else nc.n_modes
    if nc.q is not None and (not nc.q or any(v < 0 for v in nc.q)):
        errors.append("noise q must be a nonempty list of nonnegative numbers")
    if n_modes < 1:
        errors.append(f"n_modes = {n_modes} must be positive")
    if n_modes > dc.M:
        errors.append(f"n_modes = {n_modes} must not exceed M = {dc.M}")
    if ec.kind not in KINDS:
        errors.append(f"experiment kind {ec.kind!r} not one of {', '.join(KINDS)}")
    if ec.kind in NEEDS_EPS and not ec.eps:
        errors.append(f"experiment {ec.kind} needs a nonempty eps list")
    if any(e < 0 for e in ec.eps):
        errors.append("eps values must be nonnegative")
    if ec.kind in ("ldp-slope", "exp-estimate") and any(e == 0 for e in ec.eps):
        errors.append(f"experiment {ec.kind} needs positive eps values")
    if ec.delta < 0:
        errors.append(f"delta = {ec.delta} must be nonnegative")
    if ec.n_paths < 1 or (ec.kind in MC_KINDS and ec.n_paths < 100):
        errors.append(f"n_paths = {ec.n_paths} too small")
    for name in ("x0", "target", "control"):
        limit = n_modes if name == "control" else dc.M
        for k, _ in getattr(ec, name):
            if not 1 <= k <= limit:
                errors.append(f"{name} mode {k} outside 1..{limit}")
    if ec.kind in ("rate", "ldp-slope") and not (ec.target or ec.control):
        errors.append(f"experiment {ec.kind} needs a target or a planted control")
    if ec.kind == "approx-errors":
        if not ec.n_list or not ec.N_list:
            errors.append("approx-errors needs nonempty n_list and N_list")
        for n in ec.n_list:
            if not 1 <= n <= n_modes:
                errors.append(f"n = {n} outside 1..{n_modes}")
    if ec.kind == "exp-estimate" and (not ec.gamma or any(g < 0 for g in ec.gamma)):
        errors.append("gamma must be a nonempty list of nonnegative values")
    if ec.kind == "approx-errors":
        for N in ec.N_list:
            if N < 1 or dc.K % N:
                errors.append(f"N = {N} must divide K = {dc.K}")
    uses_rate = ec.kind == "rate" or (ec.kind == "ldp-slope" and ec.compare_rate)
    if uses_rate and (ec.n_ctrl_times < 1 or dc.K % ec.n_ctrl_times):
        errors.append(f"n_ctrl_times = {ec.n_ctrl_times} must divide K = {dc.K}")
    if ec.path_index < 0:
        errors.append("path_index must be nonnegative")
    if errors:
        raise ConfigError("; ".join(errors))
