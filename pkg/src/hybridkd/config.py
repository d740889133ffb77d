"""Run configuration: strict JSON (de)serialisation and dataset presets."""
from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path

from .data_pipeline import AugmentationSpec, OneVsRestSpec
from .distill_objectives import LossWeights
from .nn_core import ConfigurationError
from .train_engine import TrainConfig


@dataclass(frozen=True)
class ToySpec:
    num_classes: int = 2
    per_class: int = 200
    image_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    dataset_root: str | None = None
    toy: ToySpec | None = None
    split_ratios: tuple[float, ...] | None = None
    split_seed: int = 0
    one_vs_rest: OneVsRestSpec | None = None
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)
    normalization: str = "fixed"
    normalization_mean: tuple[float, ...] | None = None
    normalization_std: tuple[float, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    num_classes: int = 2
    output_dir: str = "runs/default"
    checkpoint: str | None = None
    image: str | None = None
    class_index: int | None = None
    preset: str | None = None

    def validate(self, command: str) -> "RunConfig":
        if self.normalization not in ("fixed", "dataset"):
            raise ConfigurationError("normalization must be 'fixed' or 'dataset'")
        if command in ("train", "eval"):
            if (self.dataset_root is None) == (self.toy is None):
                raise ConfigurationError("set exactly one of dataset_root or toy")
            if self.split_ratios is None:
                raise ConfigurationError("split_ratios is required for this dataset")
            if len(self.split_ratios) != 3:
                raise ConfigurationError("split_ratios needs (train, val, test)")
            if any(r <= 0 for r in self.split_ratios) or abs(sum(self.split_ratios) - 1) > 1e-9:
                raise ConfigurationError("split ratios must be positive and sum to 1")
        if command in ("eval", "gradcam") and not self.checkpoint:
            raise ConfigurationError(f"{command} needs --checkpoint")
        if command == "gradcam" and not self.image:
            raise ConfigurationError("gradcam needs --image")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.class_index is not None and not 0 <= self.class_index < self.num_classes:
            raise ConfigurationError(f"class index {self.class_index} outside [0, {self.num_classes})")
        if self.augmentation.resize < 32:
            raise ConfigurationError("input size must be >= 32")
        return self


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _convert(tp, value, where):
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigurationError(f"{where} must not be null")
    if is_dataclass(tp):
        return from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"{where} must be a list")
        inner = typing.get_args(tp)[0]
        return tuple(_convert(inner, v, f"{where}[]") for v in value)
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"{where} must be a number")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"{where} must be an integer")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigurationError(f"{where} must be true/false")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigurationError(f"{where} must be a string")
        return value
    return value


def from_dict(cls, data, where: str = "config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if isinstance(data, cls):
        return data
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where} must be an object")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in {where}: {unknown}")
    kwargs = {k: _convert(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def to_dict(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


_TABLE3 = (0.3, 0.7, 0.7, 0.7, 4.0, 4.0)
_POTATO = (0.2, 1.0, 0.8, 0.8, 4.0, 4.0)


def _weights(values):
    return dict(zip(("lambda1", "lambda2", "lambda3", "lambda4", "tau", "tau_prime"), values))


PRESETS: dict[str, dict] = {
    "rice-variety": {
        "augmentation": {"resize": 224, "hflip": True, "vflip": True, "rotation": 10.0},
        "train": {"loss_weights": _weights(_TABLE3)},
    },
    "rice-leaf": {
        "split_ratios": [0.8, 0.1, 0.1],
        "augmentation": {"resize": 224, "color_jitter": True, "affine": True, "rotation": 20.0},
        "train": {"loss_weights": _weights(_TABLE3)},
    },
    "potato-leaf": {
        "split_ratios": [0.81, 0.09, 0.10],
        "augmentation": {"resize": 224, "color_jitter": True, "affine": True, "rotation": 30.0},
        "train": {"loss_weights": _weights(_POTATO), "batch_size": 4, "optimizer": "adamw",
                  "weight_decay": 1e-2},
    },
    "coffee-leaf": {
        "split_ratios": [0.64, 0.16, 0.20],
        "augmentation": {"resize": 224, "color_jitter": True, "affine": True, "rotation": 20.0},
        "train": {"loss_weights": _weights(_TABLE3)},
    },
    "corn-leaf": {
        "split_ratios": [0.64, 0.16, 0.20],
        "augmentation": {"resize": 224, "hflip": True, "vflip": True, "rotation": 30.0},
        "train": {"loss_weights": _weights(_TABLE3), "batch_size": 8},
    },
    # desk-scale synthetic run
    "toy": {
        "toy": {"num_classes": 2, "per_class": 200, "image_size": 64, "seed": 0},
        "split_ratios": [0.8, 0.1, 0.1],
        "augmentation": {"resize": 64},
        "normalization": "dataset",
        "train": {"loss_weights": _weights(_TABLE3), "epochs": 30, "batch_size": 32,
                  "learning_rate": 1e-3, "early_stop_patience": 3},
    },
}


def resolve(preset: str | None = None, config_path: str | Path | None = None,
            overrides: dict | None = None) -> RunConfig:
    """preset < config file < overrides, then strict parsing."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data = merge(data, PRESETS[preset])
        data["preset"] = preset
    if config_path is not None:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {config_path}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigurationError("config file must hold a JSON object")
        data = merge(data, loaded)
    data = merge(data, overrides or {})
    return from_dict(RunConfig, data)


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed), split_seed=seed)
