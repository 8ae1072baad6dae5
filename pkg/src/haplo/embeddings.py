"""Modality-specific input embeddings and the stage-1 output heads."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, add, exp, take
from .nn import Linear, Module, param

# CLIP-style initial temperature and its clamp range
INIT_TEMPERATURE = 0.07
TEMPERATURE_RANGE = (1e-3, 100.0)


class StateError(RuntimeError):
    """An operation was called in the wrong training stage or mode."""


def normalize_pixels(images: np.ndarray) -> np.ndarray:
    """Map [0, 1] pixels to [-1, 1] per channel."""
    return (np.asarray(images) - 0.5) / 0.5


def patchify(images: np.ndarray, k: int) -> np.ndarray:
    """(N, H, W, C) -> (N, (H/k)*(W/k), k*k*C) in raster patch order."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[None]
    N, H, W, C = images.shape
    if H % k or W % k:
        raise ValueError(f"image of size H={H}, W={W} is not divisible by patch size k={k}")
    gh, gw = H // k, W // k
    x = images.reshape(N, gh, k, gw, k, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(N, gh * gw, k * k * C)


class PatchEmbedder(Module):
    """A single linear layer over k x k pixel windows plus a learnable 1-D position table."""

    def __init__(self, patch: int, channels: int, n_patches: int, d: int,
                 rng: np.random.Generator, dtype=np.float64, pos_std: float = 0.02):
        self.patch = patch
        self.proj = Linear(patch * patch * channels, d, rng, dtype)
        self.pos = param(rng.normal(0.0, pos_std, size=(n_patches, d)), dtype)

    def __call__(self, images: np.ndarray) -> Tensor:
        """Embed (N, H, W, C) or (H, W, C) images to (N, hw, d) or (hw, d)."""
        single = np.ndim(images) == 3
        patches = patchify(images, self.patch).astype(self.pos.dtype)
        if patches.shape[1] != self.pos.shape[0]:
            raise ValueError(f"image yields {patches.shape[1]} patches, position table has "
                             f"{self.pos.shape[0]}")
        z = add(self.proj(Tensor(patches)), self.pos)
        return z.reshape(z.shape[1:]) if single else z


class TextEmbedder(Module):
    """Frozen-able embedding matrix W (vocab x l) and a linear projector l -> d."""

    def __init__(self, vocab: int, l: int, d: int, rng: np.random.Generator, dtype=np.float64):
        self.W = param(rng.normal(0.0, 1.0 / np.sqrt(l), size=(vocab, l)), dtype)
        self.projector = Linear(l, d, rng, dtype)

    def lookup(self, token_ids) -> Tensor:
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.W.shape[0]):
            raise IndexError(f"token id outside vocabulary of size {self.W.shape[0]}")
        return take(self.W, ids)

    def __call__(self, token_ids) -> Tensor:
        return self.projector(self.lookup(token_ids))

    def freeze(self, frozen: bool = True) -> None:
        self.W.requires_grad = not frozen
        if frozen:
            self.W.grad = None


class StageOneHeads(Module):
    """Vision head (d -> teacher dim), text head (d -> l), and a log-scale temperature.

    The temperature is stored as ``log(1/tau)`` so it stays positive.
    """

    def __init__(self, d: int, teacher_dim: int, l: int, rng: np.random.Generator, dtype=np.float64):
        self.vision = Linear(d, teacher_dim, rng, dtype)
        # zero start: the text targets are unit-scale rows while pre-decoder states are not
        self.text = Linear(d, l, rng, dtype, std=0.0)
        self.log_scale = param(np.log(1.0 / INIT_TEMPERATURE), dtype)

    def __call__(self, H_v: Tensor, H_t: Tensor) -> tuple[Tensor, Tensor]:
        return self.vision(H_v), self.text(H_t)

    def temperature(self) -> Tensor:
        return exp(self.log_scale * -1.0)

    def clamp_temperature(self) -> None:
        lo, hi = TEMPERATURE_RANGE
        self.log_scale.data = np.clip(self.log_scale.data, np.log(1.0 / hi), np.log(1.0 / lo))
