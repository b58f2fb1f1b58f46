"""Experiment configuration: a single JSON document per run, validated with field paths."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .calculus import BUILTIN_FUNCTIONALS
from .measures import EmpiricalMeasure
from .model import BUILTIN_MODELS, Model, build_model
from .simulate import FixedTimes, IidSurvival, Never, StoppingRule, TimeGrid, uniform_survival_law
from .snell import SpatialGrid

SUBCOMMANDS = ("simulate", "solve", "policy-eval", "chaos", "converge", "check-derivatives")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _get(block: dict, key: str, path: str, kind, default=..., *, allow_none=False):
    where = f"{path}.{key}" if path else key
    if key not in block:
        if default is ...:
            raise ConfigError(where, "missing required field")
        return default
    value = block[key]
    if value is None and allow_none:
        return None
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    if not isinstance(value, kind) or (kind is int and isinstance(value, bool)):
        raise ConfigError(where, f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}")
    return value


def _check_keys(block: dict, allowed, path: str):
    for key in block:
        if key not in allowed:
            raise ConfigError(f"{path}.{key}" if path else key, "unknown field")


@dataclass
class ExperimentConfig:
    raw: dict
    seed: int
    model_name: str
    model_params: dict
    grid: TimeGrid
    N: int | None = None
    Ns: list = field(default_factory=list)
    initial: tuple | None = None
    m0: EmpiricalMeasure | None = None
    backend: str = "Lattice"
    sgrid: SpatialGrid | None = None
    lsmc: dict = field(default_factory=dict)
    rule: StoppingRule = field(default_factory=Never)
    replications: int = 1000
    flow: dict = field(default_factory=dict)
    eta: float | None = None
    tol: float = 1e-10
    h_fd: float = 1e-4
    indicator_scale: float = 1.0
    threads: int = 1
    out: str = "out"
    functionals: list = field(default_factory=list)
    check_Ns: list = field(default_factory=lambda: [1, 2, 5, 20])
    check_states: int = 20
    table: str | None = None
    scheme: str = "euler"

    def model(self) -> Model:
        return build_model(self.model_name, **self.model_params)

    @property
    def digest(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _parse_model(raw: dict) -> tuple:
    block = _get(raw, "model", "", dict)
    _check_keys(block, {"name", "params"}, "model")
    name = _get(block, "name", "model", str)
    if name not in BUILTIN_MODELS:
        raise ConfigError("model.name", f"unknown model {name!r}; choose from {sorted(BUILTIN_MODELS)}")
    params = _get(block, "params", "model", dict, {})
    try:
        build_model(name, **params)
    except TypeError as exc:
        raise ConfigError("model.params", str(exc)) from None
    return name, params


def _parse_grid(raw: dict) -> TimeGrid:
    block = _get(raw, "grid", "", dict)
    _check_keys(block, {"t0", "T", "n_steps"}, "grid")
    t0 = _get(block, "t0", "grid", float, 0.0)
    T = _get(block, "T", "grid", float)
    n = _get(block, "n_steps", "grid", int)
    try:
        return TimeGrid(t0, T, n)
    except ValueError as exc:
        raise ConfigError("grid", str(exc)) from None


def _parse_initial(raw: dict, dim: int):
    if "initial" not in raw:
        return None
    block = _get(raw, "initial", "", dict)
    _check_keys(block, {"x", "i"}, "initial")
    x = np.asarray(_get(block, "x", "initial", list), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    i = np.asarray(_get(block, "i", "initial", list, [1] * len(x)), dtype=np.int8)
    if x.shape[1] != dim:
        raise ConfigError("initial.x", f"points must have dimension {dim}")
    if len(i) != len(x) or not np.all((i == 0) | (i == 1)):
        raise ConfigError("initial.i", "one 0/1 indicator per particle is required")
    return x, i


def _parse_m0(raw: dict, dim: int):
    if "m0" not in raw:
        return None
    block = _get(raw, "m0", "", dict)
    if "gaussian_quantiles" in block:
        _check_keys(block, {"gaussian_quantiles"}, "m0")
        g = _get(block, "gaussian_quantiles", "m0", dict)
        path = "m0.gaussian_quantiles"
        _check_keys(g, {"mean", "std", "atoms", "dead_fraction"}, path)
        K = _get(g, "atoms", path, int)
        mean = _get(g, "mean", path, float, 0.0)
        std = _get(g, "std", path, float, 1.0)
        dead = _get(g, "dead_fraction", path, float, 0.0)
        x = mean + std * norm.ppf((np.arange(K) + 0.5) / K)
        i = np.ones(K, dtype=np.int8)
        i[: int(round(dead * K))] = 0
        return EmpiricalMeasure.uniform(np.repeat(x[:, None], dim, axis=1), i)
    _check_keys(block, {"x", "i", "w"}, "m0")
    x = np.asarray(_get(block, "x", "m0", list), dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    i = np.asarray(_get(block, "i", "m0", list, [1] * len(x)), dtype=np.int8)
    w = _get(block, "w", "m0", list, None)
    try:
        if w is None:
            return EmpiricalMeasure.uniform(x, i)
        return EmpiricalMeasure(x, i, np.asarray(w, dtype=float))
    except ValueError as exc:
        raise ConfigError("m0", str(exc)) from None


def _parse_rule(raw: dict, grid: TimeGrid) -> StoppingRule:
    if "rule" not in raw:
        return Never()
    block = _get(raw, "rule", "", dict)
    _check_keys(block, {"kind", "nodes", "law"}, "rule")
    kind = _get(block, "kind", "rule", str)
    if kind == "Never":
        return Never()
    if kind == "FixedTimes":
        nodes = _get(block, "nodes", "rule", list)
        rule = FixedTimes(np.asarray(nodes, dtype=np.int64))
        try:
            rule.check(grid)
        except ValueError as exc:
            raise ConfigError("rule.nodes", str(exc)) from None
        return rule
    if kind == "IidSurvival":
        law = block.get("law", "uniform")
        if law == "uniform":
            return IidSurvival(uniform_survival_law(grid.n_steps))
        if not isinstance(law, list) or len(law) != grid.n_steps + 2:
            raise ConfigError("rule.law", f"expected 'uniform' or {grid.n_steps + 2} probabilities")
        try:
            return IidSurvival(np.asarray(law, dtype=float))
        except ValueError as exc:
            raise ConfigError("rule.law", str(exc)) from None
    raise ConfigError("rule.kind", f"unknown rule {kind!r}; choose from Never, FixedTimes, IidSurvival")


TOP_LEVEL = {"seed", "model", "grid", "N", "Ns", "initial", "m0", "backend", "rule", "replications", "flow",
             "tolerances", "indicator_scale", "threads", "output", "functionals", "check", "table",
             "scheme"}


def parse_config(raw: dict, *, seed: int | None = None, out: str | None = None,
                 threads: int | None = None) -> ExperimentConfig:
    """Validate a configuration dict; command-line overrides take precedence."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "configuration must be a JSON object")
    raw = dict(raw)
    _check_keys(raw, TOP_LEVEL, "")
    if seed is not None:
        raw["seed"] = seed
    if "seed" not in raw:
        raise ConfigError("seed", "a seed is mandatory (config field or --seed)")
    s = _get(raw, "seed", "", int)
    if s < 0 or s >= 2 ** 64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    name, params = _parse_model(raw)
    dim = int(params.get("dim", 1))
    grid = _parse_grid(raw)
    cfg = ExperimentConfig(raw=raw, seed=s, model_name=name, model_params=params, grid=grid)
    cfg.N = _get(raw, "N", "", int, None)
    cfg.Ns = [int(v) for v in _get(raw, "Ns", "", list, [])]
    if any(n < 1 for n in cfg.Ns) or (cfg.N is not None and cfg.N < 1):
        raise ConfigError("Ns" if cfg.Ns else "N", "particle counts must be positive")
    cfg.initial = _parse_initial(raw, dim)
    cfg.m0 = _parse_m0(raw, dim)
    if "backend" in raw:
        b = _get(raw, "backend", "", dict)
        _check_keys(b, {"name", "sgrid", "lsmc"}, "backend")
        cfg.backend = _get(b, "name", "backend", str, "Lattice")
        if cfg.backend not in ("Lattice", "LSMC", "auto"):
            raise ConfigError("backend.name", f"unknown backend {cfg.backend!r}; choose from Lattice, LSMC, auto")
        if "sgrid" in b:
            sg = _get(b, "sgrid", "backend", dict)
            _check_keys(sg, {"x_min", "x_max", "n_x"}, "backend.sgrid")
            try:
                cfg.sgrid = SpatialGrid(_get(sg, "x_min", "backend.sgrid", float),
                                        _get(sg, "x_max", "backend.sgrid", float),
                                        _get(sg, "n_x", "backend.sgrid", int))
            except ValueError as exc:
                raise ConfigError("backend.sgrid", str(exc)) from None
        cfg.lsmc = _get(b, "lsmc", "backend", dict, {})
        _check_keys(cfg.lsmc, {"n_paths", "degree", "cond_limit", "ridge"}, "backend.lsmc")
    cfg.rule = _parse_rule(raw, grid)
    cfg.replications = _get(raw, "replications", "", int, 1000)
    if cfg.replications < 1:
        raise ConfigError("replications", "must be positive")
    cfg.flow = _get(raw, "flow", "", dict, {})
    _check_keys(cfg.flow, {"M", "k_max", "tol", "bias_check", "secondary"}, "flow")
    tol = _get(raw, "tolerances", "", dict, {})
    _check_keys(tol, {"eta", "tol", "h_fd"}, "tolerances")
    cfg.eta = _get(tol, "eta", "tolerances", float, None, allow_none=True)
    cfg.tol = _get(tol, "tol", "tolerances", float, 1e-10)
    cfg.h_fd = _get(tol, "h_fd", "tolerances", float, 1e-4)
    cfg.indicator_scale = _get(raw, "indicator_scale", "", float, 1.0)
    if threads is not None:
        raw["threads"] = threads
    cfg.threads = _get(raw, "threads", "", int, 1)
    outb = _get(raw, "output", "", dict, {})
    _check_keys(outb, {"dir"}, "output")
    cfg.out = out if out is not None else _get(outb, "dir", "output", str, "out")
    cfg.functionals = _get(raw, "functionals", "", list, sorted(BUILTIN_FUNCTIONALS))
    for k, f in enumerate(cfg.functionals):
        if f not in BUILTIN_FUNCTIONALS:
            raise ConfigError(f"functionals[{k}]", f"unknown functional {f!r}; choose from {sorted(BUILTIN_FUNCTIONALS)}")
    chk = _get(raw, "check", "", dict, {})
    _check_keys(chk, {"N", "states"}, "check")
    cfg.check_Ns = [int(v) for v in _get(chk, "N", "check", list, [1, 2, 5, 20])]
    cfg.check_states = _get(chk, "states", "check", int, 20)
    cfg.table = _get(raw, "table", "", str, None)
    cfg.scheme = _get(raw, "scheme", "", str, "euler")
    if cfg.scheme not in ("euler", "two_point"):
        raise ConfigError("scheme", f"unknown scheme {cfg.scheme!r}; choose from euler, two_point")
    return cfg


def load_config(path, **overrides) -> ExperimentConfig:
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON ({exc})") from None
    return parse_config(raw, **overrides)
