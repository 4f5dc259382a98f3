"""Run configuration: JSON document, strict validation and hashing.

Layout (every section optional, every key optional, unknown keys are errors)::

    {
      "generator":  {TaskGeneratorConfig fields},
      "hyper_init": {"seed", "kind", "out_dim", "normalize", "output_scale",
                     "lengthscale", "offset", "tau", "prior_mean_train",
                     "prior_mean_test"},
      "train":      {"epochs", "episodes_per_epoch", "loss_kind", "inner_steps",
                     "mc_samples", "fd_step", "lr_feature_map", "lr_kernel",
                     "seed", "meta_batch", "max_abort_fraction",
                     "queries_per_class"},
      "eval":       {EvalConfig fields},
      "calibrate":  {"bins", "tau_grid", "validation_episodes", "test_episodes"},
      "gibbs":      {"episodes", "max_points", "max_classes", "burn_in",
                     "samples", "tau", "tolerance", "seed"},
      "surface":    {"lo", "hi", "points"},
      "output_dir": "path"
    }
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .elbo import LossConfig
from .kernels import HyperParams, KernelSpec, FeatureMap
from .meta import TaskGeneratorConfig, TrainConfig
from .predict import TAU_GRID, EvalConfig


class ConfigError(ValueError):
    """Configuration file missing, malformed or failing validation."""


@dataclass(frozen=True)
class HyperInit:
    seed: int = 0
    kind: str = "cosine"
    out_dim: int = 8
    normalize: bool = False
    output_scale: float = 1.0
    lengthscale: float = 1.0
    offset: float = 1.0
    tau: float = 0.2
    prior_mean_train: float = 0.0
    prior_mean_test: float = 0.0

    def build(self, in_dim):
        rng = np.random.default_rng(self.seed)
        fm = FeatureMap.random(rng, in_dim, self.out_dim, self.normalize)
        kernel = KernelSpec(self.kind, self.output_scale, self.lengthscale, self.offset)
        return HyperParams(fm, kernel, tau=self.tau, prior_mean_train=self.prior_mean_train,
                           prior_mean_test=self.prior_mean_test)


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    episodes_per_epoch: int = 100
    loss_kind: str = "ML"
    inner_steps: int = 2
    mc_samples: int = 16
    fd_step: float = 1e-4
    lr_feature_map: float = 1e-3
    lr_kernel: float = 1e-4
    seed: int = 0
    meta_batch: int = 1
    max_abort_fraction: float = 0.05
    queries_per_class: int | None = None

    def build(self, checkpoint_path=None):
        loss = LossConfig(self.loss_kind, self.inner_steps, self.mc_samples, self.fd_step)
        return TrainConfig(self.epochs, self.episodes_per_epoch, loss, self.lr_feature_map,
                           self.lr_kernel, self.seed, checkpoint_path, self.meta_batch,
                           self.max_abort_fraction)


@dataclass(frozen=True)
class CalibrateSection:
    bins: int = 15
    tau_grid: tuple = TAU_GRID
    validation_episodes: int = 100
    test_episodes: int = 300


@dataclass(frozen=True)
class GibbsSection:
    episodes: int = 10
    max_points: int = 6
    max_classes: int = 3
    burn_in: int = 2000
    samples: int = 20000
    tau: float = 1.0
    tolerance: float = 0.15
    seed: int = 0


@dataclass(frozen=True)
class SurfaceSection:
    lo: float = -10.0
    hi: float = 10.0
    points: int = 101


@dataclass(frozen=True)
class RunConfig:
    generator: TaskGeneratorConfig = field(default_factory=TaskGeneratorConfig)
    hyper_init: HyperInit = field(default_factory=HyperInit)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    gibbs: GibbsSection = field(default_factory=GibbsSection)
    surface: SurfaceSection = field(default_factory=SurfaceSection)
    output_dir: str = "."

    def initial_hyper(self):
        return self.hyper_init.build(self.generator.input_dim)

    def train_generator(self):
        q = self.train.queries_per_class
        return self.generator if q is None else replace(self.generator, queries_per_class=q)

    def model_hash(self):
        """Hash of the sections that define a trained model."""
        doc = {k: _plain(asdict(getattr(self, k))) for k in ("generator", "hyper_init", "train")}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def to_dict(self):
        return _plain(asdict(self))


SECTIONS = {f.name: f for f in fields(RunConfig)}


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _check_type(where, value, default, annotation):
    ann = str(annotation)
    if value is None:
        if "None" in ann:
            return value
        raise ConfigError(f"{where} must not be null")
    if isinstance(default, bool) or ann == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where} must be a list of numbers")
        return tuple(float(v) for v in value)
    if isinstance(default, int) or ann.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str) or "str" in ann:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    return value


def _build_section(name, cls, raw):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {', '.join(unknown)}")
    defaults = cls()
    kw = {k: _check_type(f"{name}.{k}", v, getattr(defaults, k), known[k].type) for k, v in raw.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from None


def parse_config(doc):
    """Validate a decoded JSON document and return a ``RunConfig``."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw = {}
    for name, value in doc.items():
        if name == "output_dir":
            if not isinstance(value, str):
                raise ConfigError("output_dir must be a string")
            kw[name] = value
        else:
            kw[name] = _build_section(name, SECTIONS[name].default_factory, value)
    cfg = RunConfig(**kw)
    if cfg.train.queries_per_class is not None and cfg.train.queries_per_class < 0:
        raise ConfigError("train.queries_per_class must be non-negative")
    try:
        LossConfig(cfg.train.loss_kind, cfg.train.inner_steps, cfg.train.mc_samples, cfg.train.fd_step)
        KernelSpec(cfg.hyper_init.kind, cfg.hyper_init.output_scale, cfg.hyper_init.lengthscale)
        cfg.train.build()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if not cfg.hyper_init.tau > 0 or cfg.hyper_init.out_dim < 1:
        raise ConfigError("hyper_init.tau must be positive and out_dim >= 1")
    if cfg.calibrate.bins < 1 or not cfg.calibrate.tau_grid or min(cfg.calibrate.tau_grid) <= 0:
        raise ConfigError("calibrate needs bins >= 1 and a non-empty grid of positive temperatures")
    g = cfg.gibbs
    if g.max_points < 2 or g.max_classes < 2 or g.burn_in < 0 or g.samples < 1 or g.episodes < 1 or not g.tau > 0:
        raise ConfigError("gibbs section has out-of-range values")
    s = cfg.surface
    if not (np.isfinite(s.lo) and np.isfinite(s.hi) and s.lo < s.hi and s.points >= 2):
        raise ConfigError("surface grid needs finite lo < hi and at least 2 points")
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(doc)
