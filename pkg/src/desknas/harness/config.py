"""Experiment configuration.

Configs are hierarchical YAML documents whose keys mirror the dataclasses
below; every key also exists as a CLI flag spelled ``--section.key``. Sections
that belong to one method (``dsnas``, ``snas``, ``proxyless``) may only appear
when that method is selected.
"""

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import yaml

from ..errors import ConfigError

METHODS = ("dsnas", "snas", "spos", "proxyless-st", "two-stage")
DATASETS = ("mnist", "cifar10", "synthetic-planted", "synthetic-blobs")


@dataclass
class DatasetConfig:
    name: str = "synthetic-planted"
    path: Optional[str] = None
    n_train: int = 5000
    n_val: int = 1000
    augment: bool = False
    data_seed: Optional[int] = None
    # synthetic tasks
    channels: int = 8
    signal_channels: int = 2
    image_size: int = 6
    classes: int = 4
    separation: float = 1.0
    noise: float = 0.45


@dataclass
class SearchSpaceConfig:
    preset: str = "auto"  # auto | desk | planted
    layers: int = 8
    candidates: list = field(default_factory=lambda: ["conv3", "conv5", "sepconv3", "skip"])
    batch_norm: bool = True
    bn_stats: str = "shared"
    init_seed: Optional[int] = None


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    dtype: str = "float64"
    counters: bool = False


@dataclass
class ThetaOptConfig:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 4e-5
    schedule: str = "cosine"


@dataclass
class AlphaOptConfig:
    lr: float = 0.03
    beta1: float = 0.9
    beta2: float = 0.999
    split: str = "same"  # same | val
    baseline: str = "none"  # none | ema
    ema_decay: float = 0.9


@dataclass
class DSNASConfig:
    h: float = 2.0


@dataclass
class SNASConfig:
    # piecewise-linear temperature anneal: [[fraction of training, temperature], ...]
    temperature: list = field(default_factory=lambda: [[0.0, 1.0], [1.0, 0.03]])


@dataclass
class ProxylessConfig:
    max_candidates: int = 8


@dataclass
class EAConfig:
    pool_size: int = 32
    tournament: int = 4
    mutation_prob: float = 0.1
    crossover_prob: float = 0.5
    generations: int = 20
    flops_ceiling: Optional[float] = None
    top_k: int = 8
    eval_samples: int = 500


@dataclass
class PipelineConfig:
    retrain_epochs: int = 5
    seeds: list = field(default_factory=list)  # extra seeds for the intra-run report


SECTIONS = {
    "dataset": DatasetConfig, "search_space": SearchSpaceConfig, "train": TrainConfig,
    "theta": ThetaOptConfig, "alpha": AlphaOptConfig, "dsnas": DSNASConfig,
    "snas": SNASConfig, "proxyless": ProxylessConfig, "ea": EAConfig,
    "pipeline": PipelineConfig,
}
METHOD_SECTIONS = {"dsnas": "dsnas", "snas": "snas", "proxyless": "proxyless-st"}


@dataclass
class ExperimentConfig:
    method: str = "dsnas"
    seed: Optional[int] = None
    output_dir: Optional[str] = None
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    search_space: SearchSpaceConfig = field(default_factory=SearchSpaceConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    theta: ThetaOptConfig = field(default_factory=ThetaOptConfig)
    alpha: AlphaOptConfig = field(default_factory=AlphaOptConfig)
    dsnas: Optional[DSNASConfig] = None
    snas: Optional[SNASConfig] = None
    proxyless: Optional[ProxylessConfig] = None
    ea: EAConfig = field(default_factory=EAConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        for section, method in METHOD_SECTIONS.items():
            if getattr(self, section) is None and self.method == method:
                setattr(self, section, SECTIONS[section]())

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    def config_hash(self):
        d = self.to_dict()
        d.pop("output_dir", None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError("unknown config keys", keys=sorted(unknown))
        kwargs = {}
        for key, value in data.items():
            if key in SECTIONS:
                if value is None:
                    kwargs[key] = None
                    continue
                if not isinstance(value, dict):
                    raise ConfigError("config section must be a mapping", section=key)
                sec = SECTIONS[key]
                bad = set(value) - {f.name for f in dataclasses.fields(sec)}
                if bad:
                    raise ConfigError("unknown config keys", section=key, keys=sorted(bad))
                fields = {f.name: f for f in dataclasses.fields(sec)}
                kwargs[key] = sec(**{k: _coerce(fields[k], v, f"{key}.{k}") for k, v in value.items()})
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def from_yaml(cls, text):
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError("config is not valid YAML", detail=str(exc)) from None
        return cls.from_dict(data)

    @classmethod
    def load(cls, path):
        if not os.path.exists(path):
            raise ConfigError("config file not found", path=str(path))
        with open(path) as fh:
            return cls.from_yaml(fh.read())


def flat_keys():
    """Every settable dotted key with its declared default (for CLI flags)."""
    keys = {}
    for f in dataclasses.fields(ExperimentConfig):
        if f.name in SECTIONS:
            for g in dataclasses.fields(SECTIONS[f.name]):
                keys[f"{f.name}.{g.name}"] = g
        else:
            keys[f.name] = f
    return keys


def set_key(cfg, dotted, value):
    """Assign ``value`` (YAML-parsed when it is a string) to a dotted key."""
    if isinstance(value, str):
        try:
            value = yaml.safe_load(value)
        except yaml.YAMLError:
            pass
    parts = dotted.split(".")
    keys = flat_keys()
    if dotted not in keys:
        raise ConfigError("unknown config key", key=dotted)
    value = _coerce(keys[dotted], value, dotted)
    if len(parts) == 1:
        setattr(cfg, parts[0], value)
        return cfg
    section = getattr(cfg, parts[0])
    if section is None:
        section = SECTIONS[parts[0]]()
        setattr(cfg, parts[0], section)
    setattr(section, parts[1], value)
    return cfg


def _coerce(f, value, key):
    # YAML 1.1 reads "1e-3" as a string; numeric fields accept it anyway
    kind = f.type if isinstance(f.type, type) else None
    if kind is None and "float" in str(f.type):
        kind = float
    if kind is float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ConfigError("expected a number", key=key, value=value) from None
    if kind is int and isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            raise ConfigError("expected an integer", key=key, value=value) from None
    return value


def validate(cfg):
    """Raise ConfigError for anything that would fail later; no side effects."""
    if cfg.method not in METHODS:
        raise ConfigError("unknown method", method=cfg.method, allowed=list(METHODS))
    if cfg.seed is None or not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
        raise ConfigError("seed must be an integer", seed=cfg.seed)
    if cfg.dataset.name not in DATASETS:
        raise ConfigError("unknown dataset", name=cfg.dataset.name, allowed=list(DATASETS))
    if cfg.dataset.name in ("mnist", "cifar10"):
        if not cfg.dataset.path or not os.path.isdir(cfg.dataset.path):
            raise ConfigError("dataset path does not exist", path=cfg.dataset.path)
    for section, method in METHOD_SECTIONS.items():
        if getattr(cfg, section) is not None and cfg.method != method:
            raise ConfigError(f"section '{section}' only applies to method {method}",
                              method=cfg.method)
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1:
        raise ConfigError("epochs must be >= 0 and batch_size >= 1")
    if cfg.train.dtype not in ("float64", "float32"):
        raise ConfigError("dtype must be float64 or float32", dtype=cfg.train.dtype)
    if cfg.search_space.preset not in ("auto", "desk", "planted"):
        raise ConfigError("unknown search-space preset", preset=cfg.search_space.preset)
    if cfg.search_space.bn_stats not in ("shared", "per-candidate"):
        raise ConfigError("bn_stats must be shared or per-candidate")
    if cfg.theta.schedule not in ("cosine", "constant"):
        raise ConfigError("theta.schedule must be cosine or constant")
    seeds = cfg.pipeline.seeds
    if not isinstance(seeds, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in seeds):
        raise ConfigError("pipeline.seeds must be a list of integers", value=seeds)
    if cfg.alpha.split not in ("same", "val") or cfg.alpha.baseline not in ("none", "ema"):
        raise ConfigError("alpha.split must be same|val and alpha.baseline none|ema")
    if cfg.dsnas is not None and cfg.dsnas.h <= 0:
        raise ConfigError("dsnas.h must be positive", h=cfg.dsnas.h)
    if cfg.snas is not None:
        pts = cfg.snas.temperature
        if not pts or any(len(p) != 2 or p[1] <= 0 for p in pts):
            raise ConfigError("snas.temperature must be [[fraction, positive temperature], ...]")
    if cfg.method == "two-stage" and cfg.ea.top_k < 1:
        raise ConfigError("ea.top_k must be >= 1")
    return cfg
