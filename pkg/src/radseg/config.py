"""Run configuration: one JSON document covering every module plus the optimizer."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .capr import CaprConfig
from .data import SceneSpec
from .decoder import DecoderConfig
from .encoder import EncoderConfig
from .losses import LossWeights
from .model import Ablation


@dataclass
class LossConfig(LossWeights):
    r_band: int = 2
    r_ring: int = 1


@dataclass
class MetricsConfig:
    biou_band: int = 3


@dataclass
class DataConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    n_train: int = 8
    n_val: int = 4


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 3e-4
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"
    warmup_fraction: float = 0.0


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    capr: CaprConfig = field(default_factory=CaprConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ablation: Ablation = field(default_factory=Ablation)
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    eval_every: int = 1

    def validate(self) -> None:
        self.encoder.validate()
        self.decoder.validate()
        self.losses.validate()
        self.data.scene.validate()
        if self.optimizer.kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer.kind!r}")
        if self.optimizer.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown learning-rate schedule {self.optimizer.schedule!r}")
        if not 0.0 <= self.optimizer.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must be in [0, 1)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = _build(cls, raw, "config")
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text())


class ConfigError(ValueError):
    pass


def _build(tp, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(tp)
    names = {f.name for f in dataclasses.fields(tp)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    kwargs = {}
    for key, value in raw.items():
        kwargs[key] = _coerce(hints[key], value, f"{where}.{key}")
    return tp(**kwargs)


def _coerce(hint, value, where: str):
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, where)
    origin = typing.get_origin(hint)
    if origin is tuple and isinstance(value, list):
        return tuple(value)
    return value
