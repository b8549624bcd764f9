"""Declarative run configuration.

A run is described by one nested config with sections for data, model,
feature augmentation, loss weights, the training loop, and evaluation.
Every field has a default; loading materializes all defaults so the
effective config saved next to an artifact is complete. Unknown keys are
rejected. Any field is overridable from the command line with a dotted
key, e.g. ``trainer.total_iters=100``.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from typing import List

import yaml

from .featureaug import FAConfig
from .splits import SplitSpec


class ConfigError(ValueError):
    """Invalid configuration contents or overrides."""


@dataclasses.dataclass
class DataConfig:
    name: str = "synthetic"          # synthetic | cifar10 | cifar100
    num_classes: int = 4
    head_labeled: int = 200
    head_unlabeled: int = 800
    gamma: float = 10.0
    seed: int = 1
    image_size: int = 32             # synthetic only
    noise: float = 0.15              # synthetic only
    test_per_class: int = 250        # synthetic only
    root: str = ""                   # dataset cache override; env var wins if empty

    def split_spec(self) -> SplitSpec:
        return SplitSpec(
            num_classes=self.num_classes,
            head_labeled=self.head_labeled,
            head_unlabeled=self.head_unlabeled,
            gamma=self.gamma,
            seed=self.seed,
        )


@dataclasses.dataclass
class ModelConfig:
    backbone: str = "small-cnn"      # small-cnn | wrn-28-2
    proj_dim: int = 64
    ema_momentum: float = 0.999


@dataclasses.dataclass
class LossConfig:
    lambda_u: float = 1.0
    lambda_align: float = 1.0
    lambda_c: float = 1.0
    tau: float = 0.95
    proto_temperature: float = 0.05
    contrast_temperature: float = 0.07

    def __post_init__(self):
        for name in ("lambda_u", "lambda_align", "lambda_c"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


@dataclasses.dataclass
class OptimConfig:
    lr: float = 0.03
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 5e-4
    cosine_decay: bool = True


@dataclasses.dataclass
class TrainConfig:
    total_iters: int = 5000
    batch_labeled: int = 32
    batch_unlabeled: int = 32
    queue_capacity: int = 128
    histogram_window: float = 1e4
    eval_interval: int = 500
    seed: int = 1
    deterministic: bool = True
    optimizer: OptimConfig = dataclasses.field(default_factory=OptimConfig)

    def __post_init__(self):
        if self.total_iters <= 0:
            raise ConfigError("total_iters must be positive")
        if self.batch_labeled < 1 or self.batch_unlabeled < 0:
            raise ConfigError("batch sizes must be positive (unlabeled may be 0)")


@dataclasses.dataclass
class EvalConfig:
    tail_k: int = 3
    final_window: int = 20
    batch_size: int = 256


@dataclasses.dataclass
class RunConfig:
    data: DataConfig = dataclasses.field(default_factory=DataConfig)
    model: ModelConfig = dataclasses.field(default_factory=ModelConfig)
    fa: FAConfig = dataclasses.field(default_factory=FAConfig)
    loss: LossConfig = dataclasses.field(default_factory=LossConfig)
    trainer: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        return _build_dataclass(cls, doc, path="")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def save(self, path) -> None:
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must contain a mapping")
        return cls.from_dict(doc)


def _build_dataclass(cls, doc: dict, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {path or cls.__name__!r} must be a mapping, got {type(doc).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        where = path or "top level"
        raise ConfigError(f"unknown config key(s) at {where}: {sorted(unknown)}")
    kwargs = {}
    for name, value in doc.items():
        default = fields[name].default_factory() if fields[name].default_factory is not dataclasses.MISSING else fields[name].default  # type: ignore[misc]
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build_dataclass(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _coerce(text: str, current):
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse {text!r} as boolean")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(text)
    if isinstance(current, float):
        return float(text)
    return text


def apply_overrides(config: RunConfig, overrides: List[str]) -> RunConfig:
    """Apply ``section.field=value`` overrides and revalidate the config."""
    doc = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        node = doc
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config section {dotted!r}")
            node = node[key]
        leaf = keys[-1]
        if leaf not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        if isinstance(node[leaf], dict):
            raise ConfigError(f"{dotted!r} names a section, not a value")
        node[leaf] = _coerce(text, node[leaf])
    return RunConfig.from_dict(doc)


def _cifar_preset(dataset: str, num_classes: int, head_labeled: int, head_unlabeled: int, gamma: float) -> RunConfig:
    return RunConfig(
        data=DataConfig(
            name=dataset,
            num_classes=num_classes,
            head_labeled=head_labeled,
            head_unlabeled=head_unlabeled,
            gamma=gamma,
        ),
        model=ModelConfig(backbone="wrn-28-2"),
        trainer=TrainConfig(total_iters=250_000, batch_labeled=64, batch_unlabeled=64, eval_interval=500),
    )


def _synthetic_desk_preset() -> RunConfig:
    return RunConfig(
        data=DataConfig(
            name="synthetic", num_classes=4, head_labeled=200, head_unlabeled=800, gamma=10.0
        ),
        model=ModelConfig(backbone="small-cnn"),
        trainer=TrainConfig(total_iters=5000, batch_labeled=32, batch_unlabeled=32, eval_interval=500),
    )


def _cifar_desk_preset() -> RunConfig:
    return RunConfig(
        data=DataConfig(
            name="cifar10", num_classes=10, head_labeled=150, head_unlabeled=1200, gamma=50.0
        ),
        model=ModelConfig(backbone="small-cnn"),
        trainer=TrainConfig(total_iters=15_000, batch_labeled=32, batch_unlabeled=32, eval_interval=500),
    )


PRESETS = {
    # full-scale benchmark settings
    "cifar10lt-g100-n500": lambda: _cifar_preset("cifar10", 10, 500, 4000, 100.0),
    "cifar10lt-g100-n1500": lambda: _cifar_preset("cifar10", 10, 1500, 3000, 100.0),
    "cifar10lt-g150-n500": lambda: _cifar_preset("cifar10", 10, 500, 4000, 150.0),
    "cifar10lt-g150-n1500": lambda: _cifar_preset("cifar10", 10, 1500, 3000, 150.0),
    "cifar100lt-g10-n50": lambda: _cifar_preset("cifar100", 100, 50, 400, 10.0),
    "cifar100lt-g10-n150": lambda: _cifar_preset("cifar100", 100, 150, 300, 10.0),
    "cifar100lt-g20-n50": lambda: _cifar_preset("cifar100", 100, 50, 400, 20.0),
    "cifar100lt-g20-n150": lambda: _cifar_preset("cifar100", 100, 150, 300, 20.0),
    # desk-scale presets
    "synthetic4-desk": _synthetic_desk_preset,
    "cifar10lt-desk": _cifar_desk_preset,
}


def preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name]()
