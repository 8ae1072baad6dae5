"""Pre-decoder, connector, post-decoder, and the frozen stand-in vision teacher.

The pre-decoder uses ViT-style blocks (pre-LayerNorm, GELU MLP); the post-decoder
uses Llama-style blocks (RMSNorm, gated SiLU MLP). Both apply rotary embeddings
to queries and keys inside every attention layer and honour the mixed mask.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, concat, layer_norm, rms_norm, take
from .batch import Batch
from .config import ModelConfig
from .embeddings import PatchEmbedder, StageOneHeads, StateError, TextEmbedder
from .masking import Block
from .nn import Linear, Module, param

# Masked logits are replaced (not offset) by this value: exp(NEG_INF - max) is exactly 0
# in float32 and float64, and it stays finite so 0 * NEG_INF never produces NaN.
NEG_INF = -1e9


@dataclass
class LayerCache:
    k: np.ndarray | None = None   # (B, heads, T, head_dim), rotary already applied
    v: np.ndarray | None = None

    @property
    def length(self) -> int:
        return 0 if self.k is None else self.k.shape[2]


def rope_for(positions: np.ndarray, head_dim: int, cfg: ModelConfig, dtype):
    if not cfg.use_rope:
        return None
    return ad.rope_tables(positions, head_dim, cfg.rope_base, dtype)


class SelfAttention(Module):
    def __init__(self, d: int, heads: int, rng, dtype, bias: bool = True, out_scale: float = 1.0):
        self.heads = heads
        self.q = Linear(d, d, rng, dtype, bias)
        self.k = Linear(d, d, rng, dtype, bias)
        self.v = Linear(d, d, rng, dtype, bias)
        self.o = Linear(d, d, rng, dtype, bias, std=out_scale / np.sqrt(d))

    def _split(self, t: Tensor, B: int, L: int) -> Tensor:
        return t.reshape(B, L, self.heads, -1).transpose(0, 2, 1, 3)

    def __call__(self, x: Tensor, mask: np.ndarray, rope, cache: LayerCache | None = None,
                 capture: list | None = None, blocks: Sequence[Block] | None = None) -> Tensor:
        B, L, d = x.shape
        hd = d // self.heads
        q, k, v = (self._split(f(x), B, L) for f in (self.q, self.k, self.v))
        if rope is not None:
            q, k = ad.rope(q, *rope), ad.rope(k, *rope)
        if cache is not None:
            if cache.k is not None:
                k = concat([Tensor(cache.k), k], axis=2)
                v = concat([Tensor(cache.v), v], axis=2)
            cache.k, cache.v = k.data, v.data
        if blocks is not None and capture is None and not ad.is_grad_enabled() and B == 1:
            out = Tensor(block_attention(q.data[0], k.data[0], v.data[0], blocks)[None])
        else:
            scores = (q @ k.T) * (1.0 / np.sqrt(hd))
            scores = ad.masked_fill(scores, ~mask[:, None, :, :], NEG_INF)
            probs = ad.softmax(scores, axis=-1)
            if capture is not None:
                capture.append(probs.data)
            out = probs @ v
        return self.o(out.transpose(0, 2, 1, 3).reshape(B, L, d))


class PreDecoderBlock(Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int, rng, dtype, out_scale: float = 1.0):
        self.ln1_g = param(np.ones(d), dtype)
        self.ln1_b = param(np.zeros(d), dtype)
        self.attn = SelfAttention(d, heads, rng, dtype, bias=True, out_scale=out_scale)
        self.ln2_g = param(np.ones(d), dtype)
        self.ln2_b = param(np.zeros(d), dtype)
        self.fc1 = Linear(d, mlp_ratio * d, rng, dtype)
        self.fc2 = Linear(mlp_ratio * d, d, rng, dtype, std=out_scale / np.sqrt(mlp_ratio * d))

    def __call__(self, x, mask, rope, cache=None, capture=None, blocks=None):
        x = x + self.attn(layer_norm(x, self.ln1_g, self.ln1_b), mask, rope, cache, capture, blocks)
        return x + self.fc2(ad.gelu(self.fc1(layer_norm(x, self.ln2_g, self.ln2_b))))


class PostDecoderBlock(Module):
    def __init__(self, d: int, heads: int, hidden: int, rng, dtype, out_scale: float = 1.0):
        self.norm1 = param(np.ones(d), dtype)
        self.attn = SelfAttention(d, heads, rng, dtype, bias=False, out_scale=out_scale)
        self.norm2 = param(np.ones(d), dtype)
        self.gate = Linear(d, hidden, rng, dtype, bias=False)
        self.up = Linear(d, hidden, rng, dtype, bias=False)
        self.down = Linear(hidden, d, rng, dtype, bias=False, std=out_scale / np.sqrt(hidden))

    def __call__(self, x, mask, rope, cache=None, capture=None, blocks=None):
        x = x + self.attn(rms_norm(x, self.norm1), mask, rope, cache, capture, blocks)
        h = rms_norm(x, self.norm2)
        return x + self.down(ad.silu(self.gate(h)) * self.up(h))


class HaploModel(Module):
    """Embeddings -> pre-decoder -> connector -> post-decoder -> tied output head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, with_heads: bool = True):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        self.patch = PatchEmbedder(cfg.patch, cfg.channels, cfg.n_patches, cfg.d, rng, dt)
        self.text = TextEmbedder(cfg.vocab, cfg.l, cfg.d, rng, dt)
        pre_scale = 1.0 / np.sqrt(2.0 * max(cfg.pre_depth, 1))
        post_scale = 1.0 / np.sqrt(2.0 * max(cfg.post_depth, 1))
        self.pre_blocks = [PreDecoderBlock(cfg.d, cfg.heads, cfg.mlp_ratio, rng, dt, pre_scale)
                           for _ in range(cfg.pre_depth)]
        self.connector = Linear(cfg.d, cfg.d_post, rng, dt)
        if cfg.d == cfg.d_post:
            self.connector.set_identity()
        self.post_blocks = [PostDecoderBlock(cfg.d_post, cfg.post_heads, cfg.post_hidden, rng, dt,
                                             post_scale) for _ in range(cfg.post_depth)]
        self.post_norm = param(np.ones(cfg.d_post), dt)
        self.heads = StageOneHeads(cfg.d, cfg.teacher_dim, cfg.l, rng, dt) if with_heads else None
        self._capture_enabled = False
        self._attn_maps: list[np.ndarray] | None = None

    # ---- parameter groups ---------------------------------------------------
    def pre_decoder_parameters(self) -> dict[str, Tensor]:
        """Everything stage 1 trains except the heads: patch/text embedders and pre-decoder."""
        return {k: p for k, p in self.named_parameters()
                if k.startswith(("patch.", "text.projector.", "pre_blocks."))}

    def post_decoder_parameters(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters()
                if k.startswith(("connector.", "post_blocks.", "post_norm"))}

    def drop_heads(self) -> None:
        self.heads = None

    # ---- embeddings ----------------------------------------------------------
    def embed(self, batch: Batch) -> Tensor:
        """Assemble Z_m (B, L, d) from patch and text embeddings in sequence order."""
        B, L = batch.shape
        rows = []
        if len(batch.images):
            rows.append(self.patch(batch.images).reshape(-1, self.cfg.d))
        if len(batch.text_ids):
            rows.append(self.text(batch.text_ids))
        rows.append(Tensor(np.zeros((1, self.cfg.d), dtype=self.cfg.dtype)))
        return take(concat(rows, axis=0), batch.source)

    def embed_tokens(self, token_ids) -> Tensor:
        return self.text(np.asarray(token_ids, dtype=np.int64)).reshape(1, -1, self.cfg.d)

    # ---- decoders ------------------------------------------------------------
    def _check(self, x: Tensor, mask: np.ndarray, caches):
        B, L = x.shape[:2]
        past = caches[0].length if caches else 0
        if mask.shape != (B, L, past + L):
            raise ValueError(f"mask shape {mask.shape} does not match sequence (B={B}, L={L}, "
                             f"cached={past})")

    def pre_decode(self, Z: Tensor, mask: np.ndarray, positions: np.ndarray,
                   caches: list[LayerCache] | None = None, capture: bool = False,
                   blocks: Sequence[Block] | None = None) -> Tensor:
        self._check(Z, mask, caches)
        rope = rope_for(positions, self.cfg.d // self.cfg.heads, self.cfg, Z.dtype)
        maps: list | None = [] if capture else None
        x = Z
        for i, blk in enumerate(self.pre_blocks):
            x = blk(x, mask, rope, caches[i] if caches else None, maps, blocks)
        if capture:
            self._capture_enabled = True
            self._attn_maps = maps
        return x

    def connect(self, H: Tensor) -> Tensor:
        return self.connector(H)

    def post_decode(self, X: Tensor, mask: np.ndarray, positions: np.ndarray,
                    caches: list[LayerCache] | None = None,
                    blocks: Sequence[Block] | None = None) -> Tensor:
        """Logits (B, L, C); position i scores the token at i + 1."""
        self._check(X, mask, caches)
        rope = rope_for(positions, self.cfg.d_post // self.cfg.post_heads, self.cfg, X.dtype)
        x = X
        for i, blk in enumerate(self.post_blocks):
            x = blk(x, mask, rope, caches[i] if caches else None, None, blocks)
        if self.post_blocks:
            x = rms_norm(x, self.post_norm)
        return x @ self.text.W.T

    def forward(self, batch: Batch, capture: bool = False) -> Tensor:
        H = self.pre_decode(self.embed(batch), batch.mask, batch.positions, capture=capture)
        return self.post_decode(self.connect(H), batch.mask, batch.positions)

    __call__ = forward

    # ---- stage-1 views ---------------------------------------------------------
    def split_by_modality(self, H: Tensor, batch: Batch) -> tuple[Tensor, Tensor]:
        flat = H.reshape(-1, H.shape[-1])
        return take(flat, batch.image_flat), take(flat, batch.text_flat)

    def apply_heads(self, H_v: Tensor, H_t: Tensor) -> tuple[Tensor, Tensor]:
        if self.heads is None:
            raise StateError("stage-1 heads are not present (model is in stage-2 mode)")
        return self.heads(H_v, H_t)

    # ---- attention maps ---------------------------------------------------------
    def attention_map(self, layer: int, query_positions, key_positions,
                      batch_index: int = 0, per_head: bool = False) -> np.ndarray:
        """Pre-decoder softmax rows for the requested query/key positions, head-averaged."""
        if not self._capture_enabled or self._attn_maps is None:
            raise StateError("attention capture was not enabled on the last forward pass")
        if not 0 <= layer < len(self._attn_maps):
            raise IndexError(f"layer {layer} out of range for {len(self._attn_maps)} pre-decoder layers")
        probs = self._attn_maps[layer][batch_index]          # (heads, L, L)
        sub = probs[:, np.asarray(query_positions)][:, :, np.asarray(key_positions)]
        return sub if per_head else sub.mean(axis=0)

    # ---- inheritance --------------------------------------------------------------
    def inherit_from(self, teacher: VisionTeacher) -> None:
        """Copy the teacher's patch embedding and blocks into the pre-decoder."""
        if teacher.depth != len(self.pre_blocks) or teacher.dim != self.cfg.d:
            raise ValueError("teacher geometry does not match the pre-decoder")
        src = teacher.parameters()
        for name, p in self.parameters().items():
            if name.startswith("patch."):
                p.data = src[name].data.astype(p.dtype).copy()
            elif name.startswith("pre_blocks."):
                p.data = src["blocks." + name[len("pre_blocks."):]].data.astype(p.dtype).copy()
        if self.heads is not None and self.cfg.teacher_dim == self.cfg.d:
            self.heads.vision.set_identity()


class VisionTeacher(Module):
    """Small frozen ViT whose final hidden states serve as the vision distillation target."""

    def __init__(self, cfg: ModelConfig, seed: int):
        rng = np.random.default_rng(seed)
        dt = cfg.dtype
        self.cfg = cfg
        self.dim = cfg.teacher_dim
        self.depth = cfg.teacher_depth
        heads = cfg.heads if cfg.teacher_dim == cfg.d else max(1, cfg.teacher_dim // 16)
        self.n_heads = heads
        # a visible position signal so teacher features depend on where a patch sits
        self.patch = PatchEmbedder(cfg.patch, cfg.channels, cfg.n_patches, cfg.teacher_dim, rng, dt,
                                   pos_std=0.5)
        scale = 1.0 / np.sqrt(2.0 * max(self.depth, 1))
        self.blocks = [PreDecoderBlock(cfg.teacher_dim, heads, cfg.mlp_ratio, rng, dt, scale)
                       for _ in range(self.depth)]
        for p in self.parameters().values():
            p.requires_grad = False

    def __call__(self, images: np.ndarray) -> np.ndarray:
        """Normalized images (N, H, W, C) -> features (N * hw, teacher_dim)."""
        with ad.no_grad():
            x = self.patch(images)
            N, hw, _ = x.shape
            mask = np.ones((N, hw, hw), dtype=bool)
            rope = rope_for(np.arange(hw), self.dim // self.n_heads, self.cfg, x.dtype)
            for blk in self.blocks:
                x = blk(x, mask, rope)
        return x.data.reshape(N * hw, self.dim)


def block_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, blocks: Sequence[Block],
                    scale: float | None = None) -> np.ndarray:
    """Attention over (heads, L, hd) arrays computed tile by tile from block descriptors.

    Only allowed tiles are visited; tiles that are fully masked are never touched.
    Per row range an online softmax accumulates across the tiles.
    """
    H, L, hd = q.shape
    scale = 1.0 / np.sqrt(hd) if scale is None else scale
    offset = k.shape[1] - L  # keys may include a cached prefix
    out = np.zeros_like(q)
    by_rows: dict[tuple[int, int], list[Block]] = {}
    for b in blocks:
        by_rows.setdefault((b.r0, b.r1), []).append(b)
    for (r0, r1), tiles in by_rows.items():
        qs = q[:, r0:r1] * scale
        m = np.full((H, r1 - r0, 1), -np.inf, dtype=q.dtype)
        denom = np.zeros((H, r1 - r0, 1), dtype=q.dtype)
        acc = np.zeros((H, r1 - r0, hd), dtype=q.dtype)
        for t in tiles:
            s = qs @ k[:, offset + t.c0:offset + t.c1].transpose(0, 2, 1)
            if t.causal:
                rows = np.arange(t.r0, t.r1)[:, None]
                cols = np.arange(t.c0, t.c1)[None, :]
                s = np.where(cols <= rows, s, -np.inf)
            m_new = np.maximum(m, s.max(axis=-1, keepdims=True))
            corr = np.exp(m - m_new)
            p = np.exp(s - m_new)
            denom = denom * corr + p.sum(axis=-1, keepdims=True)
            acc = acc * corr + p @ v[:, offset + t.c0:offset + t.c1]
            m = m_new
        out[:, r0:r1] = acc / denom
    return out


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, allow: np.ndarray) -> np.ndarray:
    """Reference masked attention over (heads, L, hd) arrays."""
    s = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    s = np.where(allow[None], s, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    return (p / p.sum(axis=-1, keepdims=True)) @ v
