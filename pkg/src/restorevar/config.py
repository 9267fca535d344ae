"""Run configuration: flat ``key=value`` files with ``#`` comments.

Every key has a default in ``RunConfig``; unknown keys are rejected so typos
surface as errors instead of silently falling back to defaults.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable

from .autodiff.ops import ConfigError
from .codec import CodecConfig, CodecTrainConfig, ScaleSchedule
from .finetune import FinetuneConfig, LossWeights
from .refiner import LRTConfig, LRTTrainConfig
from .transformer import TransformerConfig, VarTrainConfig


@dataclass
class RunConfig:
    # general
    seed: int = 0
    data_dir: str = "runs/data"
    out_dir: str = "runs/ckpt"
    n_train: int = 256
    n_val: int = 16
    n_test: int = 64
    image_size: int = 32
    weight_decay: float = 0.01
    # codec
    vocab: int = 512
    channels: int = 16
    codec_width: int = 32
    schedule: str = "1x1,2x2,4x4,8x8"
    codec_steps: int = 1200
    codec_batch: int = 16
    codec_lr: float = 1e-3
    # scale-AR transformer
    depth: int = 6
    dim: int = 256
    heads: int = 8
    var_steps: int = 1000
    var_batch: int = 8
    var_lr: float = 5e-4
    # latent refiner
    lrt_depth: int = 3
    lrt_dim: int = 64
    lrt_heads: int = 4
    lrt_steps: int = 1500
    lrt_batch: int = 32
    lrt_lr: float = 1e-4
    # decoder fine-tune
    ft_steps: int = 400
    ft_batch: int = 16
    ft_lr: float = 1e-4
    w_l1: float = 2.0
    w_ssim: float = 0.4
    w_percep: float = 0.2
    w_adv: float = 0.01
    # inference
    sampling: str = "greedy"
    topk: int = 600
    temp: float = 1.0
    refiner: str = "lrt"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.sampling not in ("greedy", "topk"):
            raise ConfigError(f"sampling must be greedy or topk, got {self.sampling!r}")
        if self.refiner not in ("lrt", "lrt_noz", "none"):
            raise ConfigError(f"refiner must be lrt, lrt_noz or none, got {self.refiner!r}")
        if self.image_size not in (32, 64):
            raise ConfigError(f"image_size must be 32 or 64, got {self.image_size}")
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, (int, float)) and not isinstance(v, bool) and v < 0:
                raise ConfigError(f"{f.name} must be non-negative, got {v}")
        try:
            ScaleSchedule.parse(self.schedule)
        except ValueError as exc:
            raise ConfigError(f"bad schedule {self.schedule!r}: {exc}") from exc

    # ---------------------------------------------------------- conversions
    def codec_config(self) -> CodecConfig:
        return CodecConfig(vocab=self.vocab, channels=self.channels, image_size=self.image_size,
                           width=self.codec_width, schedule=ScaleSchedule.parse(self.schedule))

    def codec_train(self) -> CodecTrainConfig:
        return CodecTrainConfig(steps=self.codec_steps, batch=self.codec_batch, lr=self.codec_lr,
                                weight_decay=self.weight_decay, seed=self.seed)

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(depth=self.depth, dim=self.dim, heads=self.heads, vocab=self.vocab,
                                 cond_dim=self.channels, schedule=ScaleSchedule.parse(self.schedule))

    def var_train(self) -> VarTrainConfig:
        return VarTrainConfig(steps=self.var_steps, batch=self.var_batch, lr=self.var_lr,
                              weight_decay=self.weight_decay, seed=self.seed)

    def lrt_config(self, use_z: bool = True) -> LRTConfig:
        final = ScaleSchedule.parse(self.schedule).final
        return LRTConfig(depth=self.lrt_depth, dim=self.lrt_dim, heads=self.lrt_heads, channels=self.channels,
                         z_dim=self.dim, grid=final, use_z=use_z)

    def lrt_train(self) -> LRTTrainConfig:
        return LRTTrainConfig(steps=self.lrt_steps, batch=self.lrt_batch, lr=self.lrt_lr,
                              weight_decay=self.weight_decay, seed=self.seed)

    def finetune_train(self) -> FinetuneConfig:
        return FinetuneConfig(steps=self.ft_steps, batch=self.ft_batch, lr=self.ft_lr,
                              weight_decay=self.weight_decay, seed=self.seed)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_l1, self.w_ssim, self.w_percep, self.w_adv)

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))


FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def coerce(key: str, value: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = FIELD_TYPES[key]
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from exc


def parse_lines(lines: Iterable[str], source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        key = key.strip()
        out[key] = coerce(key, value.strip())
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file at ``path``, then ``overrides`` (already typed or strings)."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_lines(p.read_text(encoding="utf-8").splitlines(), str(p)))
    for key, value in (overrides or {}).items():
        values[key] = coerce(key, value) if isinstance(value, str) else value
    try:
        return dataclasses.replace(RunConfig(), **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
