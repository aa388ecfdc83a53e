"""Strict YAML experiment configuration.

Every key is checked against a fixed schema; unknown keys, missing required
keys and ill-typed values raise ``ConfigError`` with the dotted field path
and, where available, the line in the source file. Matrices may be written
as nested lists, as ``{diag: [...]}`` or as a scalar multiple of identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .benchmarks import BENCHMARKS
from .errors import ConfigError, SrmpcError
from .sim import CONTROLLERS

ANALYSES = ("loss_decomposition", "monte_carlo", "gamma_scaling", "alpha_sweep")


class _Node:
    """A parsed mapping that remembers where its keys came from."""

    def __init__(self, data, marks, path):
        self.data, self.marks, self.path = data, marks, path
        self.used = set()

    def where(self, key=None):
        p = f"{self.path}.{key}" if key is not None and self.path else (key or self.path or "<root>")
        line = self.marks.get(p)
        return f"{p} (line {line})" if line else p

    def fail(self, msg, key=None):
        raise ConfigError(f"{self.where(key)}: {msg}")

    def get(self, key, default=..., kind=None):
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                self.fail("required key missing", key)
            return default
        v = self.data[key]
        if kind is not None:
            v = _coerce(self, key, v, kind)
        return v

    def child(self, key, required=True):
        v = self.get(key, ... if required else None)
        if v is None:
            return None
        if not isinstance(v, dict):
            self.fail("expected a mapping", key)
        return _Node(v, self.marks, f"{self.path}.{key}" if self.path else key)

    def items(self, key, required=True):
        v = self.get(key, ... if required else [])
        if not isinstance(v, list):
            self.fail("expected a list", key)
        base = f"{self.path}.{key}" if self.path else key
        out = []
        for i, item in enumerate(v):
            if not isinstance(item, dict):
                self.fail(f"entry {i} must be a mapping", key)
            out.append(_Node(item, self.marks, f"{base}[{i}]"))
        return out

    def done(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            self.fail(f"unknown key(s) {extra}", extra[0])


def _coerce(node, key, v, kind):
    if kind is bool:
        if not isinstance(v, bool):
            node.fail("expected true/false", key)
        return v
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            node.fail("expected an integer", key)
        return v
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            node.fail("expected a number", key)
        return float(v)
    if kind is str:
        if not isinstance(v, str):
            node.fail("expected a string", key)
        return v
    if kind == "vector":
        try:
            a = np.asarray(v, float)
        except (TypeError, ValueError):
            node.fail("expected a list of numbers", key)
        if a.ndim != 1 or not np.all(np.isfinite(a)):
            node.fail("expected a flat list of finite numbers", key)
        return a
    if kind == "matrix":
        return _matrix(node, key, v)
    raise AssertionError(kind)


def _matrix(node, key, v, n=None):
    if isinstance(v, dict):
        if set(v) != {"diag"}:
            node.fail("matrix mapping must have the single key 'diag'", key)
        d = _coerce(node, key, v["diag"], "vector")
        return np.diag(d)
    if isinstance(v, (int, float)) and not isinstance(v, bool):
        return float(v)  # scalar multiple of identity, sized later
    try:
        a = np.asarray(v, float)
    except (TypeError, ValueError):
        node.fail("expected a matrix (nested list, {diag: [...]} or scalar)", key)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or not np.all(np.isfinite(a)):
        node.fail("expected a 2-d matrix of finite numbers", key)
    return a


def _square(value, n, where):
    if np.isscalar(value):
        return value * np.eye(n)
    if value.shape != (n, n):
        raise ConfigError(f"{where}: expected shape ({n}, {n}), got {value.shape}")
    return value


def _marks(text):
    """Line numbers of every key, keyed by dotted path."""
    marks = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else k.value
                marks[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = f"{path}[{i}]"
                marks[p] = v.start_mark.line + 1
                walk(v, p)

    root = yaml.compose(text, Loader=yaml.SafeLoader)
    if root is not None:
        walk(root, "")
    return marks


@dataclass
class NoiseConfig:
    W: np.ndarray | float
    V: np.ndarray | float
    gamma_w: float | None = None
    gamma_v: float | None = None
    radius_factor: float = 4.0


@dataclass
class ControllerSpec:
    name: str
    kind: str
    alpha: float = 0.0


@dataclass
class SimSection:
    steps: int
    y0: np.ndarray
    Sigma0: np.ndarray | float
    x0_star: np.ndarray | None = None
    horizon: int = 20
    seed: int = 0
    divergence_bound: float = 1e3
    shrinking: bool = False
    plant_noise: bool = True
    sample_initial_error: bool = False
    tol: float = 1e-6
    max_iter: int = 200
    initial_control: float = 0.0


@dataclass
class AnalysisSpec:
    kind: str
    controller: str = "nominal"
    trials: int = 100
    levels: tuple = (1.0, 0.5, 0.25)
    alphas: tuple = (0.5, 1.0, 2.0)
    horizon: int | None = None
    tol: float = 1e-10


@dataclass
class ExperimentConfig:
    benchmark: str
    params: dict
    noise: NoiseConfig
    sim: SimSection
    controllers: list = field(default_factory=list)
    analyses: list = field(default_factory=list)
    output_dir: str = "out"
    plot_csv: bool = False
    source: str = ""

    @property
    def digest(self):
        """SHA-256 of the canonical JSON form of the parsed configuration."""
        return config_hash(self)


def _canonical(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _canonical(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if hasattr(obj, "__dataclass_fields__"):
        return {k: _canonical(getattr(obj, k)) for k in sorted(obj.__dataclass_fields__) if k != "source"}
    return obj


def config_hash(cfg: ExperimentConfig):
    text = json.dumps(_canonical(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def _benchmark_params(node):
    if node is None:
        return {}
    out = {}
    for k, v in node.data.items():
        node.used.add(k)
        if k in ("delta",):
            out[k] = _coerce(node, k, v, float)
        else:
            out[k] = np.atleast_2d(_matrix(node, k, v))
    return out


def parse_config(text, source="<string>") -> ExperimentConfig:
    try:
        data = yaml.safe_load(text)
        marks = _marks(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    root = _Node(data, marks, "")

    bench = root.child("benchmark")
    name = bench.get("name", kind=str)
    if name not in BENCHMARKS:
        bench.fail(f"unknown benchmark {name!r}; expected one of {list(BENCHMARKS)}", "name")
    params = _benchmark_params(bench.child("params", required=False))
    bench.done()

    nz = root.child("noise")
    noise = NoiseConfig(
        W=nz.get("W", kind="matrix"), V=nz.get("V", kind="matrix"),
        gamma_w=nz.get("gamma_w", None, float), gamma_v=nz.get("gamma_v", None, float),
        radius_factor=nz.get("radius_factor", 4.0, float))
    if noise.radius_factor <= 0:
        nz.fail("must be positive", "radius_factor")
    nz.done()

    sn = root.child("sim")
    d = SimSection.__dataclass_fields__
    sim = SimSection(
        steps=sn.get("steps", kind=int), y0=sn.get("y0", kind="vector"), Sigma0=sn.get("Sigma0", kind="matrix"),
        x0_star=sn.get("x0_star", None, "vector"),
        horizon=sn.get("horizon", d["horizon"].default, int), seed=sn.get("seed", 0, int),
        divergence_bound=sn.get("divergence_bound", 1e3, float),
        shrinking=sn.get("shrinking", False, bool), plant_noise=sn.get("plant_noise", True, bool),
        sample_initial_error=sn.get("sample_initial_error", False, bool),
        tol=sn.get("tol", 1e-6, float), max_iter=sn.get("max_iter", 200, int),
        initial_control=sn.get("initial_control", 0.0, float))
    if sim.steps < 1:
        sn.fail("must be at least 1", "steps")
    if sim.horizon < 1:
        sn.fail("must be at least 1", "horizon")
    if sim.seed < 0:
        sn.fail("must be non-negative", "seed")
    if sim.divergence_bound <= 0:
        sn.fail("must be positive", "divergence_bound")
    sn.done()

    controllers = []
    for c in root.items("controllers", required=False):
        spec = ControllerSpec(name=c.get("name", kind=str), kind=c.get("type", kind=str),
                              alpha=c.get("alpha", 0.0, float))
        if spec.kind not in CONTROLLERS:
            c.fail(f"expected one of {list(CONTROLLERS)}", "type")
        if spec.alpha < 0:
            c.fail("must be non-negative", "alpha")
        if spec.kind == "nominal" and spec.alpha:
            c.fail("the nominal controller takes no alpha", "alpha")
        c.done()
        controllers.append(spec)
    names = [c.name for c in controllers]
    if len(set(names)) != len(names):
        root.fail("controller names must be unique", "controllers")

    analyses = []
    for a in root.items("analysis", required=False):
        kind = a.get("kind", kind=str)
        if kind not in ANALYSES:
            a.fail(f"expected one of {list(ANALYSES)}", "kind")
        spec = AnalysisSpec(kind=kind, controller=a.get("controller", "nominal", str),
                            trials=a.get("trials", 100, int), tol=a.get("tol", 1e-10, float),
                            horizon=a.get("horizon", None, int))
        if "levels" in a.data:
            spec.levels = tuple(a.get("levels", kind="vector"))
        if "alphas" in a.data:
            spec.alphas = tuple(a.get("alphas", kind="vector"))
        if spec.controller not in CONTROLLERS:
            a.fail(f"expected one of {list(CONTROLLERS)}", "controller")
        if kind in ("monte_carlo", "gamma_scaling") and spec.trials < 2:
            a.fail("at least two trials are required", "trials")
        if kind == "gamma_scaling" and (len(spec.levels) < 3 or any(
                b >= c for c, b in zip(spec.levels, spec.levels[1:])) or spec.levels[-1] <= 0):
            a.fail("need at least three positive, strictly decreasing levels", "levels")
        if kind == "alpha_sweep" and (not spec.alphas or min(spec.alphas) < 0):
            a.fail("need non-negative alphas", "alphas")
        a.done()
        analyses.append(spec)

    out = root.child("output", required=False)
    output_dir, plot_csv = "out", False
    if out is not None:
        output_dir = out.get("dir", "out", str)
        plot_csv = out.get("plot_csv", False, bool)
        out.done()
    root.done()

    cfg = ExperimentConfig(name, params, noise, sim, controllers, analyses, output_dir, plot_csv, source)
    try:
        model = build_model(cfg)
    except (SrmpcError, TypeError, ValueError) as exc:
        raise ConfigError(f"benchmark.params: {exc}") from None
    nx, ny = model.n_x, model.n_h
    for label, vec in (("sim.y0", sim.y0), ("sim.x0_star", sim.x0_star)):
        if vec is not None and vec.shape != (nx,):
            raise ConfigError(f"{label}: expected {nx} entries, got {vec.shape[0]}")
    sim.Sigma0 = _square(sim.Sigma0, nx, "sim.Sigma0")
    noise.W = _square(noise.W, nx, "noise.W")
    noise.V = _square(noise.V, ny, "noise.V")
    try:
        build_noise(cfg)
    except SrmpcError as exc:
        raise ConfigError(f"noise: {exc}") from None
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, str(path))


def build_model(cfg: ExperimentConfig):
    from .benchmarks import instantiate_benchmark

    return instantiate_benchmark(cfg.benchmark, cfg.params)


def build_noise(cfg: ExperimentConfig):
    from .estimator import NoiseSpec

    n = cfg.noise
    if n.gamma_w is None and n.gamma_v is None:
        return NoiseSpec.from_covariances(n.W, n.V, n.radius_factor)
    auto = NoiseSpec.from_covariances(n.W, n.V, n.radius_factor)
    return NoiseSpec(n.W, n.V, auto.gamma_w if n.gamma_w is None else n.gamma_w,
                     auto.gamma_v if n.gamma_v is None else n.gamma_v)


def build_sim_config(cfg: ExperimentConfig, controller: ControllerSpec | None = None):
    from .sim import SimConfig

    s = cfg.sim
    kw = dict(steps=s.steps, x0_star=s.y0 if s.x0_star is None else s.x0_star, y0=s.y0, Sigma0=s.Sigma0,
              horizon=s.horizon, seed=s.seed, divergence_bound=s.divergence_bound, shrinking=s.shrinking,
              plant_noise=s.plant_noise, sample_initial_error=s.sample_initial_error, tol=s.tol,
              max_iter=s.max_iter, initial_control=s.initial_control)
    if controller is not None:
        kw.update(controller=controller.kind, alpha=controller.alpha)
    return SimConfig(**kw)
