"""Run configuration: nested dataclasses, YAML round-trip, dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .geom import BEVGridSpec
from .losses import LossWeights
from .synth.scene import WorldConfig

DISTILL_FLAGS = ("xod", "xfd", "xat", "xis")


@dataclass
class OptimizerConfig:
    lr: float = 2e-3
    steps: int = 2000
    batch_size: int = 8
    weight_decay: float = 1e-4
    cosine_decay: bool = True


@dataclass
class RunConfig:
    """Everything a training run depends on; hashable for caching.

    The defaults are the calibrated reference configuration: they train a
    strong point-cloud teacher and students for which the distillation
    components measurably help, in minutes per run on one CPU core.
    """

    name: str = "run"
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    train_scenes: int = 64
    val_scenes: int = 32
    weights: LossWeights = field(default_factory=LossWeights)
    enabled: tuple = ()                # subset of DISTILL_FLAGS
    xod_weighted: bool = True
    modality: str = "camera"           # camera | radar
    pretrained_pv: bool = False        # init PV extractor from the IS teacher
    optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(steps=800))
    teacher_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(steps=2000))
    is_teacher_optimizer: OptimizerConfig = field(
        default_factory=lambda: OptimizerConfig(steps=400, batch_size=2))
    n_rpn: int = 16
    eval_every: int = 0                # 0: only final evaluation
    out_dir: str = "runs"

    def __post_init__(self):
        self.enabled = tuple(self.enabled)
        unknown = set(self.enabled) - set(DISTILL_FLAGS)
        if unknown:
            raise ValueError(f"unknown distillation flags: {sorted(unknown)}")
        if self.modality not in ("camera", "radar"):
            raise ValueError(f"unknown modality: {self.modality}")
        if self.modality == "radar" and "xis" in self.enabled:
            raise ValueError(
                "radar students have no camera images: X-IS is not available")


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, data: dict):
    kwargs = {}
    hints = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in hints:
            raise ValueError(f"unknown config key: {cls.__name__}.{key}")
        kwargs[key] = value
    for name, f in hints.items():
        if name not in kwargs:
            continue
        v = kwargs[name]
        if name == "grid":
            kwargs[name] = BEVGridSpec(**{
                k: tuple(x) if isinstance(x, list) else x
                for k, x in v.items()})
        elif name == "world":
            kwargs[name] = _build(WorldConfig, v)
        elif name == "weights":
            kwargs[name] = LossWeights(**v)
        elif name in ("optimizer", "teacher_optimizer",
                      "is_teacher_optimizer"):
            kwargs[name] = OptimizerConfig(**v)
        elif isinstance(v, list):
            kwargs[name] = tuple(v)
    return cls(**kwargs)


def config_to_dict(cfg: RunConfig) -> dict:
    return _to_plain(cfg)


def config_from_dict(data: dict) -> RunConfig:
    return _build(RunConfig, data)


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {})


def save_config(cfg: RunConfig, path: str):
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


def apply_override(cfg: RunConfig, spec: str) -> RunConfig:
    """Apply one 'dotted.key=value' override; the value is parsed as YAML."""
    key, _, raw = spec.partition("=")
    if not _:
        raise ValueError(f"override must look like KEY=VALUE, got {spec!r}")
    data = config_to_dict(cfg)
    node = data
    parts = key.strip().split(".")
    for p in parts[:-1]:
        if p not in node:
            raise ValueError(f"unknown config key: {key}")
        node = node[p]
    if parts[-1] not in node:
        raise ValueError(f"unknown config key: {key}")
    node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)


def config_hash(cfg, include=None) -> str:
    """Content hash of a config (or any dataclass); first 12 hex chars."""
    data = _to_plain(cfg)
    if include is not None:
        data = {k: data[k] for k in include}
    blob = json.dumps(data, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def dataset_hash(cfg: RunConfig) -> str:
    """Hash of everything the generated dataset depends on."""
    payload = {
        "world": _to_plain(cfg.world),
        "train_scenes": cfg.train_scenes,
        "val_scenes": cfg.val_scenes,
    }
    blob = json.dumps(payload, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
