"""Run configuration: TOML file plus dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import tomli

from .encoders import TextEncoderConfig, VisionEncoderConfig


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    vision: VisionEncoderConfig = field(default_factory=VisionEncoderConfig)
    # vocab_size is taken from the dataset vocabulary at build time
    text: TextEncoderConfig = field(default_factory=TextEncoderConfig)


@dataclass
class LossSettings:
    mode: str = "soft_ce"
    beta: float = 0.1
    temperature_T: float = 0.07
    tau: float = 1.0


@dataclass
class TrainSettings:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 3e-4
    weight_decay: float = 0.01
    mask_ratio: float = 0.5
    seed: int = 0
    eval_every: int = 0
    pretrain_fraction: float = 1.0
    out_dir: str = "runs/default"
    record_timing: bool = True


@dataclass
class SamplingSettings:
    paired: bool = False


@dataclass
class DataSettings:
    path: str = "data/synthetic"
    n_samples: int = 2500
    multi_label_prob: float = 0.2
    noise_sigma: float = 0.05
    seed: int = 0


@dataclass
class EvalSettings:
    ks: list[int] = field(default_factory=lambda: [1, 2, 5, 10])
    probe_epochs: int = 200
    probe_lr: float = 1e-2


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossSettings = field(default_factory=LossSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)
    data: DataSettings = field(default_factory=DataSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)

    def validate(self) -> RunConfig:
        t = self.train
        if t.batch_size < 2:
            raise ConfigError("train.batch_size must be >= 2")
        if not t.learning_rate >= 0:
            raise ConfigError("train.learning_rate must be >= 0")
        if not 0.0 <= t.mask_ratio < 1.0:
            raise ConfigError("train.mask_ratio must lie in [0, 1)")
        if not 0.0 < t.pretrain_fraction <= 1.0:
            raise ConfigError("train.pretrain_fraction must lie in (0, 1]")
        if self.loss.mode not in ("soft_ce", "verbatim"):
            raise ConfigError(f"loss.mode must be soft_ce or verbatim, got {self.loss.mode!r}")
        if self.loss.temperature_T <= 0 or self.loss.tau <= 0:
            raise ConfigError("loss temperatures must be positive")
        if self.model.vision.projection_dim != self.model.text.projection_dim:
            raise ConfigError("model.vision.projection_dim must equal model.text.projection_dim")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _build(cls, values: dict[str, Any], path: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path}{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"{path}{key} must be a table")
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, default, f"{path}{key}")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid values under {path or 'root'}: {exc}") from exc


def _coerce(value, default, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def from_dict(values: dict[str, Any]) -> RunConfig:
    return _build(RunConfig, values, "").validate()


def _set_dotted(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted} does not name a config key")
    node[parts[-1]] = value


def parse_value(text: str):
    """TOML scalar/array syntax, falling back to a bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a TOML file (FileNotFoundError propagates) and apply dotted overrides."""
    tree: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                tree = tomli.load(fh)
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: {exc}") from exc
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value)
    return from_dict(tree)
