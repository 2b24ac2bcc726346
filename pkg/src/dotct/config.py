"""Experiment configuration: a YAML file mapped onto strict dataclasses.

Unknown keys anywhere in the file are errors. Missing sections take their
defaults, which describe the noise-free six-star experiment.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhantomConfig:
    kind: str = "stars"
    nx: int = 128
    ny: int = 128
    extent: tuple = (-16.0, 16.0, -16.0, 16.0)
    seed: int = 0
    shift: float = 0.6
    rotation_deg: float = 4.0
    scale: float = 1.02


@dataclass(frozen=True)
class TimeConfig:
    N: int = 5
    M: int = 2


@dataclass(frozen=True)
class GeometryConfig:
    views_per_gate: int = 6
    offset_step: float = math.pi / 36
    num_bins: int = 180
    det_extent: tuple = (-24.0, 24.0)
    include_endpoint: bool = False


@dataclass(frozen=True)
class NoiseConfig:
    snr_db: float | None = None  # None means noise-free
    seed: int = 0


@dataclass(frozen=True)
class ModelConfig:
    mu1: float = 0.01
    mu2: float = 1e-7
    sigma: float = 2.0
    eps_tv: float = 1e-4
    kernel_mode: str = "gaussian"
    forward_mode: str = "radon"
    scheme: str = "discrete"


@dataclass(frozen=True)
class SolverSection:
    alpha: float = 2e-3
    beta: float = 0.05
    K: int = 500
    K_theta: int = 1
    K_v: int = 1
    tol_theta: float = 0.0
    tol_v: float = 0.0
    order: str = "template_first"


@dataclass(frozen=True)
class WarmStartConfig:
    strategy: str = "first_gate"
    k0: int = 1000
    k1: int = 100


@dataclass(frozen=True)
class BaselineConfig:
    iterations: int | None = None  # None: as many as the template steps of the joint run
    mu1: float | None = None       # None: model.mu1


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    time: TimeConfig = field(default_factory=TimeConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    solver: SolverSection = field(default_factory=SolverSection)
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    output: str = "runs/experiment"

    def __post_init__(self):
        validate(self)

    @property
    def snr(self) -> float:
        return math.inf if self.noise.snr_db is None else float(self.noise.snr_db)

    def baseline_iterations(self) -> int:
        if self.baseline.iterations is not None:
            return self.baseline.iterations
        return self.warm_start.k0 + self.solver.K * self.solver.K_theta

    def with_overrides(self, out: str | None = None, seed: int | None = None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, output=str(out))
        if seed is not None:
            cfg = replace(cfg, noise=replace(cfg.noise, seed=seed),
                          phantom=replace(cfg.phantom, seed=seed))
        return cfg


def _positive(name, x):
    if not (isinstance(x, (int, float)) and math.isfinite(x) and x > 0):
        raise ConfigError(f"{name} must be a positive finite number, got {x!r}")


def _nonneg(name, x):
    if not (isinstance(x, (int, float)) and math.isfinite(x) and x >= 0):
        raise ConfigError(f"{name} must be a finite number >= 0, got {x!r}")


def _choice(name, x, options):
    if x not in options:
        raise ConfigError(f"{name} must be one of {options}, got {x!r}")


def validate(c: ExperimentConfig):
    p = c.phantom
    _choice("phantom.kind", p.kind, ("stars", "heart"))
    for n in ("nx", "ny"):
        if not isinstance(getattr(p, n), int) or getattr(p, n) < 2:
            raise ConfigError(f"phantom.{n} must be an integer >= 2")
    if len(p.extent) != 4 or not (p.extent[1] > p.extent[0] and p.extent[3] > p.extent[2]):
        raise ConfigError("phantom.extent must be [x0, x1, y0, y1] with x1 > x0, y1 > y0")
    _positive("phantom.scale", p.scale)
    for n in ("N", "M"):
        if not isinstance(getattr(c.time, n), int) or getattr(c.time, n) < 1:
            raise ConfigError(f"time.{n} must be an integer >= 1")
    g = c.geometry
    if not isinstance(g.views_per_gate, int) or g.views_per_gate < 1:
        raise ConfigError("geometry.views_per_gate must be an integer >= 1")
    if not isinstance(g.num_bins, int) or g.num_bins < 1:
        raise ConfigError("geometry.num_bins must be an integer >= 1")
    if len(g.det_extent) != 2 or not g.det_extent[1] > g.det_extent[0]:
        raise ConfigError("geometry.det_extent must be [s0, s1] with s1 > s0")
    if c.noise.snr_db is not None and not math.isfinite(c.noise.snr_db):
        raise ConfigError("noise.snr_db must be finite or null")
    m = c.model
    _nonneg("model.mu1", m.mu1)
    _nonneg("model.mu2", m.mu2)
    _positive("model.sigma", m.sigma)
    _positive("model.eps_tv", m.eps_tv)
    _choice("model.kernel_mode", m.kernel_mode, ("gaussian", "identity"))
    _choice("model.forward_mode", m.forward_mode, ("radon", "identity"))
    _choice("model.scheme", m.scheme, ("discrete", "composition"))
    s = c.solver
    _positive("solver.alpha", s.alpha)
    _positive("solver.beta", s.beta)
    for n in ("K", "K_theta", "K_v"):
        if not isinstance(getattr(s, n), int) or getattr(s, n) < 0:
            raise ConfigError(f"solver.{n} must be an integer >= 0")
    _nonneg("solver.tol_theta", s.tol_theta)
    _nonneg("solver.tol_v", s.tol_v)
    _choice("solver.order", s.order, ("template_first", "velocity_first"))
    w = c.warm_start
    _choice("warm_start.strategy", w.strategy, ("static_tv", "first_gate", "none"))
    if w.k0 < 0 or w.k1 < 0:
        raise ConfigError("warm_start counts must be >= 0")
    if c.baseline.iterations is not None and c.baseline.iterations < 0:
        raise ConfigError("baseline.iterations must be >= 0")
    if c.baseline.mu1 is not None:
        _nonneg("baseline.mu1", c.baseline.mu1)


def _build(cls, data, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or 'root'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'root'}: {', '.join(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        default = getattr(defaults, name)
        if isinstance(value, str) and not isinstance(default, str):
            # YAML 1.1 reads exponents without a dot (1e-4) as strings
            try:
                value = float(value)
            except ValueError:
                pass
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}" if where else name)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where}.{name} must be a list")
            kwargs[name] = tuple(float(x) for x in value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    try:
        return _build(ExperimentConfig, data, "")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def to_dict(cfg: ExperimentConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain(asdict(cfg))


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(data or {})


def dumps(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def save(cfg: ExperimentConfig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
