"""Configuration dataclasses, JSON loading and dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import jsonschema


@dataclass
class DatasetConfig:
    image_size: int = 64
    max_instances: int = 3
    overlap_allowed: bool = True
    noise_sigma: float = 0.05
    edge_blur_px: float = 1.0
    n_train: int = 200
    n_eval: int = 50
    base_seed: int = 0

    def validate(self) -> None:
        if self.image_size % 32 or self.image_size <= 0:
            raise ValueError(f"image_size must be a positive multiple of 32, got {self.image_size}")
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")
        if self.noise_sigma < 0 or self.edge_blur_px < 0:
            raise ValueError("noise_sigma and edge_blur_px must be non-negative")


@dataclass
class BackboneConfig:
    stem_channels: int = 8
    stage_channels: tuple[int, int, int, int] = (16, 16, 32, 32)
    fpn_channels: int = 16

    def validate(self) -> None:
        if len(self.stage_channels) != 4:
            raise ValueError("stage_channels needs one width per pyramid level (4)")


@dataclass
class HeadConfig:
    channels: int = 64
    conv_stack_len: int = 4
    k: float = 2.0
    mask_size: int = 28
    roi_size: int = 14
    threshold_branch: bool = True
    p2t: bool = True
    t2p: bool = True
    threshold_source: str = "p2"
    fixed_threshold: float = 0.5

    def validate(self) -> None:
        if self.conv_stack_len < 1:
            raise ValueError("conv_stack_len must be >= 1")
        if self.mask_size != 2 * self.roi_size:
            raise ValueError("mask_size must equal 2 * roi_size")
        if self.threshold_source not in ("p2", "by_size"):
            raise ValueError(f"threshold_source must be 'p2' or 'by_size', got {self.threshold_source!r}")
        if not self.k > 0:
            raise ValueError("k must be positive")
        if not self.threshold_branch and (self.p2t or self.t2p):
            raise ValueError("fusion blocks require the threshold branch")


@dataclass
class LossWeights:
    lambda_binary: float = 2.0
    w_cls: float = 0.0
    w_box: float = 0.0
    reduction: str = "mean"
    threshold_target: str = "inverted"

    def validate(self) -> None:
        if min(self.lambda_binary, self.w_cls, self.w_box) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.reduction not in ("mean", "sum"):
            raise ValueError("reduction must be 'mean' or 'sum'")
        if self.threshold_target not in ("inverted", "direct"):
            raise ValueError("threshold_target must be 'inverted' or 'direct'")


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 3000
    rois_per_step: int = 8
    lr_decay: dict[int, float] = field(default_factory=lambda: {2000: 0.1, 2600: 0.01})
    jitter_frac: float = 0.1
    seed: int = 0
    canonical_size: float = 56.0
    k0: int = 4
    warmup_steps: int = 0
    grad_clip: float = 0.0

    def validate(self) -> None:
        if self.steps < 0 or self.rois_per_step < 1:
            raise ValueError("steps must be >= 0 and rois_per_step >= 1")
        for at in self.lr_decay:
            if self.steps and int(at) >= self.steps:
                raise ValueError(f"lr decay step {at} is not below total steps {self.steps}")
        if self.warmup_steps < 0 or self.grad_clip < 0:
            raise ValueError("warmup_steps and grad_clip must be non-negative")
        if not 0 <= self.jitter_frac <= 0.5:
            raise ValueError("jitter_frac must lie in [0, 0.5]")

    def lr_at(self, step: int) -> float:
        factor = 1.0
        for at in sorted(self.lr_decay):
            if step >= int(at):
                factor = float(self.lr_decay[at])
        if step < self.warmup_steps:
            factor *= (step + 1) / self.warmup_steps
        return self.lr * factor


@dataclass
class RunConfig:
    data: DatasetConfig = field(default_factory=DatasetConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "RunConfig":
        for section in SECTIONS:
            getattr(self, section).validate()
        return self

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["backbone"]["stage_channels"] = list(self.backbone.stage_channels)
        out["train"]["lr_decay"] = {str(k): v for k, v in sorted(self.train.lr_decay.items())}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        cfg = cls()
        for section, values in raw.items():
            if section not in SECTIONS:
                raise KeyError(f"unknown config section {section!r}")
            for key, value in values.items():
                set_dotted(cfg, f"{section}.{key}", value)
        return cfg


SECTIONS = ("data", "backbone", "head", "loss", "train")

_JSON_TYPES = {int: "integer", float: "number", bool: "boolean", str: "string"}


def _field_schema(tp) -> dict:
    if tp in _JSON_TYPES:
        return {"type": _JSON_TYPES[tp]}
    origin = typing.get_origin(tp)
    if origin is tuple:
        return {"type": "array", "items": {"type": "integer"}}
    if origin is dict:
        return {"type": "object", "additionalProperties": {"type": "number"}}
    raise TypeError(f"no schema for {tp}")


def config_schema() -> dict:
    """JSON schema for config files; every field optional."""
    props = {}
    for section in SECTIONS:
        section_cls = type(getattr(RunConfig(), section))
        hints = typing.get_type_hints(section_cls)
        props[section] = {
            "type": "object",
            "additionalProperties": False,
            "properties": {f.name: _field_schema(hints[f.name]) for f in dataclasses.fields(section_cls)},
        }
    return {
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "atmask run configuration",
        "type": "object",
        "additionalProperties": False,
        "properties": props,
    }


def _coerce(tp, value):
    origin = typing.get_origin(tp)
    if isinstance(value, str) and tp is not str:
        if tp is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0"):
                raise ValueError(f"expected a boolean, got {value!r}")
            return low in ("true", "1")
        value = json.loads(value) if origin in (tuple, dict) or value[:1] in "[{" else value
    if tp is bool:
        return bool(value)
    if tp is int:
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"expected an integer, got {value!r}")
        return int(value)
    if tp is float:
        return float(value)
    if tp is str:
        return str(value)
    if origin is tuple:
        return tuple(int(v) for v in value)
    if origin is dict:
        return {int(k): float(v) for k, v in value.items()}
    raise TypeError(f"unsupported field type {tp}")


def set_dotted(cfg: RunConfig, key: str, value: Any) -> None:
    """Assign ``section.field`` with type coercion; raises KeyError if unknown."""
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise KeyError(f"unknown config key {key!r}")
    section = getattr(cfg, parts[0])
    hints = typing.get_type_hints(type(section))
    if parts[1] not in hints:
        raise KeyError(f"unknown config key {key!r}")
    setattr(section, parts[1], _coerce(hints[parts[1]], value))


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Defaults, then the JSON file, then dotted overrides (highest precedence)."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        jsonschema.validate(raw, config_schema())
    cfg = RunConfig.from_dict(raw)
    for key, value in (overrides or {}).items():
        set_dotted(cfg, key, value)
    return cfg.validate()
