"""Run configuration: dataclasses, file loading and CLI overrides.

Config files are YAML (or JSON, which YAML accepts) with the same nesting as
:class:`RunConfig`::

    seed: 0
    model:
      csdw_enabled: true
      led_enabled: true
      encoder: {widths: [16, 32, 64, 128], blocks: 2, norm: group}
      fpn: {width: 48}
    optim: {lr: 0.0015, weight_decay: 0.01, schedule: cosine}
    epochs: 30
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class EncoderConfig:
    widths: tuple[int, ...] = (32, 64, 128, 256)
    blocks: int = 2
    refiner: str = "conv"  # "conv" | "attention"
    downsample: str = "patch"  # "patch" (one k=stride conv) | "conv" (overlapping 3x3 stride-2 steps)
    norm: str = "none"  # inside refinement blocks: "none" | "group"
    csdw_per_level: bool = True
    csdw_levels: tuple[int, ...] = (0, 1, 2, 3)
    shared_siamese: bool = True
    csdw_shared: bool = False
    csdw_norm: str = "none"

    def validate(self) -> None:
        if len(self.widths) != 4:
            raise ValueError(f"encoder needs exactly 4 stage widths, got {self.widths}")
        if any(b <= a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError(f"stage widths must be strictly increasing, got {self.widths}")
        if self.downsample not in ("conv", "patch"):
            raise ValueError(f"downsample must be 'conv' or 'patch', got {self.downsample!r}")
        if self.blocks < 0:
            raise ValueError("blocks per stage must be >= 0")
        if any(not 0 <= k < 4 for k in self.csdw_levels):
            raise ValueError(f"csdw_levels must index stages 0..3, got {self.csdw_levels}")


@dataclass
class FpnConfig:
    width: int = 128
    exchange: bool = True
    exchange_levels: tuple[int, ...] = (0, 2)
    shared: bool = True


@dataclass
class DecoderConfig:
    refiner: str = "conv"
    norm: str = "none"
    squeeze_ratio: int = 4
    tie_streams: bool = False
    aux_levels: tuple[int, ...] = (1, 2, 3)
    aux_weight: float = 0.3
    csdw_norm: str = "none"


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fpn: FpnConfig = field(default_factory=FpnConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    csdw_enabled: bool = True
    led_enabled: bool = True


@dataclass
class OptimConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    schedule: str = "constant"  # "constant" | "cosine"
    warmup_steps: int = 0
    clip_norm: float | None = None  # global gradient-norm ceiling, off when None


@dataclass
class DataConfig:
    train_count: int = 200
    val_count: int = 40
    test_count: int = 40
    size: int = 64
    min_change: float = 0.05
    max_change: float = 0.30
    max_shapes: int = 4
    augment: bool = True
    photo_prob: float = 0.5  # chance that each photometric op fires


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    data: DataConfig = field(default_factory=DataConfig)
    epochs: int = 30
    batch_size: int = 8
    patch_size: int = 64
    stride: int | None = None  # sliding-window stride, default patch // 2
    seed: int = 0
    data_dir: str | None = None
    out_dir: str = "runs/default"

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()

    @classmethod
    def from_dict(cls, d: dict[str, Any] | None) -> "RunConfig":
        return _build(cls, d or {})


def desk_config(**overrides) -> RunConfig:
    """Small model sized for CPU training on 64x64 synthetic pairs.

    Group norm in the refinement blocks plus a gradient-norm ceiling keep
    single-sample AdamW steps stable; without them runs at this learning
    rate occasionally blow up within the first few epochs.
    """
    cfg = RunConfig(
        model=ModelConfig(
            encoder=EncoderConfig(widths=(16, 32, 64, 128), blocks=2, downsample="conv", norm="group"),
            fpn=FpnConfig(width=48),
            decoder=DecoderConfig(norm="group"),
        ),
        optim=OptimConfig(lr=1.5e-3, schedule="cosine", clip_norm=1.0),
        batch_size=1,
    )
    return merge(cfg, overrides) if overrides else cfg


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, d: dict[str, Any]):
    if not isinstance(d, dict):
        raise TypeError(f"expected a mapping for {cls.__name__}, got {type(d).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(fields)
    if unknown:
        raise KeyError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for name, value in d.items():
        default = getattr(cls(), name) if name in fields else None
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, (list, tuple)):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def merge(cfg: RunConfig, overrides: dict[str, Any]) -> RunConfig:
    """Return a copy of ``cfg`` with nested ``overrides`` applied.

    Keys may be dotted (``"optim.lr"``) or nested dicts.
    """
    base = cfg.to_dict()
    for key, value in _flatten(overrides).items():
        node = base
        parts = key.split(".")
        for p in parts[:-1]:
            if p not in node or not isinstance(node[p], dict):
                raise KeyError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise KeyError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return RunConfig.from_dict(base)


def _flatten(d: dict[str, Any], prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    cfg = base if base is not None else desk_config()
    if path is None:
        return cfg
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return merge(cfg, data)
