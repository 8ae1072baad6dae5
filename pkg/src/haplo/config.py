"""Run configuration: model geometry, data, and per-stage optimization settings.

Configs are plain JSON documents mirroring these dataclasses. Dotted ``key=value``
overrides (``stage2.lr=3e-4``) are applied on top.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class ModelConfig:
    image_size: int = 28
    channels: int = 3
    patch: int = 7
    d: int = 64             # pre-decoder width
    d_post: int = 96        # post-decoder width; equals l because the output head is tied to W
    l: int = 96             # embedding-matrix width
    vocab: int = 512
    pre_depth: int = 2
    post_depth: int = 2
    heads: int = 4
    post_heads: int = 4
    mlp_ratio: int = 4
    post_hidden: int = 192
    teacher_dim: int = 64
    teacher_depth: int = 2
    max_len: int = 96
    rope_base: float = 10000.0
    use_rope: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if self.d % self.heads or self.d_post % self.post_heads:
            raise ValueError("model widths must be divisible by their head counts")
        if (self.d // self.heads) % 2 or (self.d_post // self.post_heads) % 2:
            raise ValueError("rotary embeddings need even head dims")
        if self.image_size % self.patch:
            raise ValueError(f"image size {self.image_size} not divisible by patch {self.patch}")
        if self.d_post != self.l:
            raise ValueError("d_post must equal l: the output head is tied to the embedding matrix")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @classmethod
    def paper(cls) -> ModelConfig:
        """Geometry of the full-size model (ViT-L/14 pre-decoder at 336px, 8B-class LLM)."""
        return cls(image_size=336, patch=14, d=1024, d_post=4096, l=4096, vocab=128256,
                   pre_depth=24, post_depth=32, heads=16, post_heads=32, post_hidden=14336,
                   teacher_dim=1024, teacher_depth=24, max_len=4096, rope_base=500000.0)


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 1e-4
    eps: float = 1e-8
    warmup: int = 100
    steps: int = 2000
    batch_size: int = 16
    grad_clip: float = 1.0


@dataclass
class DataConfig:
    seed: int = 0
    grid: int = 2
    colors: tuple[str, ...] = ("red", "green", "blue", "yellow", "cyan", "magenta")
    n_train: int = 4000
    n_heldout: int = 300
    heldout_fraction: float = 0.2     # share of colour layouts reserved for held-out images
    interleave_ratio: float = 0.5     # share of batch rows that are <aux, main> / <main, aux> pairs
    pixel_noise: float = 0.05


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    stage1: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=1e-4, beta1=0.9, beta2=0.95, weight_decay=1e-4, warmup=100, steps=2000))
    stage2: OptimConfig = field(default_factory=lambda: OptimConfig(
        lr=3e-4, beta1=0.9, beta2=0.98, weight_decay=0.0, warmup=100, steps=3000))
    seed: int = 0
    teacher_seed: int = 1234
    vision_weight: float = 1.0
    text_weight: float = 1.0
    init_from_teacher: bool = True     # pre-decoder inherits the vision teacher's weights
    train_embeddings_stage2: bool = True
    log_every: int = 1
    ckpt_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        return _build(cls, doc)

    def with_overrides(self, overrides: list[str] | None) -> TrainConfig:
        doc = self.to_dict()
        for item in overrides or []:
            key, sep, raw = item.partition("=")
            if not sep:
                raise ValueError(f"override {item!r} is not key=value")
            target = doc
            *path, leaf = key.strip().split(".")
            for part in path:
                target = target[part]
            if leaf not in target:
                raise KeyError(f"unknown config key {key!r}")
            target[leaf] = _parse_value(raw.strip())
        return TrainConfig.from_dict(doc)


def paper_preset() -> TrainConfig:
    """Optimizer settings reported for the full-size runs; not meant to run on a desk."""
    return TrainConfig(
        model=ModelConfig.paper(),
        stage1=OptimConfig(lr=1e-4, beta1=0.9, beta2=0.95, weight_decay=1e-4, warmup=2000,
                           steps=40000, batch_size=256),
        stage2=OptimConfig(lr=2e-5, beta1=0.9, beta2=0.98, weight_decay=0.0, warmup=2000,
                           steps=30000, batch_size=128),
    )


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(cls, doc: dict):
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in doc.items():
        if key not in names:
            raise KeyError(f"unknown config key {key!r} for {cls.__name__}")
        ftype = names[key].type
        sub = {"ModelConfig": ModelConfig, "DataConfig": DataConfig, "OptimConfig": OptimConfig}.get(
            ftype if isinstance(ftype, str) else getattr(ftype, "__name__", ""))
        if sub is not None and isinstance(value, dict):
            value = _build(sub, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> TrainConfig:
    cfg = TrainConfig() if path is None else TrainConfig.from_dict(json.loads(Path(path).read_text()))
    return cfg.with_overrides(overrides)
