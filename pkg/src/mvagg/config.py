"""Experiment configuration: scene + model + metric settings + training knobs.

Serialized as nested JSON::

    {"scene": {...}, "model": {...}, "metric": {...},
     "epochs": 20, "lr": 0.01, "momentum": 0.9, "clip_norm": 5.0,
     "seed": 0, "output_dir": "runs/default"}

``--set`` overrides use dotted keys (``model.D=6``, ``epochs=3``).
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Union

from .metrics import MetricConfig
from .pipeline.model import PipelineConfig
from .pipeline.training import TrainConfig
from .simulator import DatasetError, SceneConfig

SEED_ENV = "MVAGG_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: PipelineConfig = field(default_factory=PipelineConfig)
    metric: MetricConfig = field(default_factory=MetricConfig)
    epochs: int = 20
    lr: float = 0.01
    momentum: float = 0.9
    clip_norm: float = 5.0
    seed: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if not isinstance(self.epochs, int) or isinstance(self.epochs, bool) or self.epochs < 0:
            raise ConfigError("epochs must be a non-negative integer")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError("seed must be an integer")
        for name in ("lr", "momentum", "clip_norm"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"{name} must be a non-negative number")
        if not isinstance(self.output_dir, str):
            raise ConfigError("output_dir must be a string")

    @property
    def train(self) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.momentum, self.clip_norm, self.seed)

    def to_json(self) -> dict:
        return {
            "scene": self.scene.to_json(),
            "model": self.model.to_json(),
            "metric": asdict(self.metric),
            "epochs": self.epochs,
            "lr": self.lr,
            "momentum": self.momentum,
            "clip_norm": self.clip_norm,
            "seed": self.seed,
            "output_dir": self.output_dir,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            scene = SceneConfig.from_json(obj.pop("scene", {}))
            model = PipelineConfig.from_json(obj.pop("model", {}))
            metric = MetricConfig(**obj.pop("metric", {}))
            return cls(scene=scene, model=model, metric=metric, **obj)
        except (TypeError, ValueError, DatasetError) as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        return cls.from_json(json.loads(text))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: ExperimentConfig, overrides: Iterable[str]) -> ExperimentConfig:
    obj = config.to_json()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        target = obj
        for p in parts[:-1]:
            if not isinstance(target.get(p), dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[parts[-1]] = _parse_value(raw)
    return ExperimentConfig.from_json(obj)


def load_config(path: Union[str, Path, None] = None, overrides: Iterable[str] = (), env=None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        try:
            cfg = ExperimentConfig.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    cfg = apply_overrides(cfg, overrides)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg = replace(cfg, seed=int(env[SEED_ENV]))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    return cfg
