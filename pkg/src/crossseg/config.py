"""Training configuration and its YAML representation.

The file mirrors :class:`TrainConfig` field names exactly; unknown keys are
rejected so that a typo can never silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from crossseg.data import AugmentConfig, check_size
from crossseg.losses import ContrastiveConfig, RampUpConfig
from crossseg.models import NetworkConfig


@dataclass
class OptimizerConfig:
    lr0: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    max_iters: int = 30000
    poly_power: float = 0.9

    def validate(self):
        if not self.lr0 > 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iters <= 0:
            raise ValueError(f"max_iters must be > 0, got {self.max_iters}")


@dataclass
class BatchConfig:
    labeled: int = 2
    unlabeled: int = 6

    def validate(self):
        if self.labeled < 1 or self.unlabeled < 0:
            raise ValueError(f"batch needs labeled >= 1 and unlabeled >= 0, got {self}")


def _default_model1():
    return NetworkConfig(kind="cnn_unet")


def _default_model2():
    return NetworkConfig(kind="windowed_transformer_unet")


@dataclass
class TrainConfig:
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ramp: RampUpConfig = field(default_factory=RampUpConfig)
    contrastive: ContrastiveConfig = field(default_factory=ContrastiveConfig)
    batch: BatchConfig = field(default_factory=BatchConfig)
    image_size: tuple[int, int] = (224, 224)
    eval_every: int = 200
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    model1: NetworkConfig = field(default_factory=_default_model1)
    model2: NetworkConfig = field(default_factory=_default_model2)
    augment: AugmentConfig | None = field(default_factory=AugmentConfig)

    def validate(self):
        self.optimizer.validate()
        self.ramp.validate()
        self.contrastive.validate()
        self.batch.validate()
        self.model1.validate()
        self.model2.validate()
        check_size(self.image_size)
        if self.eval_every <= 0:
            raise ValueError(f"eval_every must be > 0, got {self.eval_every}")


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ValueError(f"{where or 'config'}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValueError(f"unknown config key(s) {', '.join(where + k for k in unknown)}")
    kwargs = {}
    for name, value in data.items():
        hint = hints[name]
        nested = [t for t in typing.get_args(hint) or (hint,) if dataclasses.is_dataclass(t)]
        if nested and value is not None:
            value = _build(nested[0], value, f"{where}{name}.")
        elif isinstance(value, list) and typing.get_origin(hint) is tuple:
            value = tuple(value)
        kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> TrainConfig:
    cfg = _build(TrainConfig, data or {}, "")
    cfg.validate()
    return cfg


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValueError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def config_to_dict(cfg) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, list):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v
    return plain(dataclasses.asdict(cfg))


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
