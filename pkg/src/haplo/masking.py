"""Mixed multimodal sequences, the mixed attention mask, and rotary position indices.

Attention rule: position i may attend to j iff ``j <= i`` or i and j lie inside the
same image. Text is therefore causal, each image is bidirectional internally, and
distinct images see each other only causally.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

TEXT, IMAGE = 0, 1


@dataclass(frozen=True)
class Segment:
    kind: str
    tokens: tuple[int, ...] = ()
    n_patches: int = 0
    image_ordinal: int | None = None

    @classmethod
    def text(cls, tokens: Sequence[int]) -> Segment:
        return cls("text", tokens=tuple(int(t) for t in tokens))

    @classmethod
    def image(cls, n_patches: int) -> Segment:
        return cls("image", n_patches=int(n_patches))

    def __len__(self) -> int:
        return len(self.tokens) if self.kind == "text" else self.n_patches


@dataclass
class MultiModalSequence:
    segments: list[Segment]
    modality: np.ndarray       # TEXT / IMAGE per position
    segment_id: np.ndarray
    image_ordinal: np.ndarray  # -1 for text
    token_ids: np.ndarray      # -1 for image positions
    positions: np.ndarray = field(repr=False)

    @property
    def length(self) -> int:
        return len(self.modality)

    def __len__(self) -> int:
        return self.length

    @property
    def n_images(self) -> int:
        return sum(s.kind == "image" for s in self.segments)

    def text_positions(self) -> np.ndarray:
        return np.nonzero(self.modality == TEXT)[0]

    def image_positions(self) -> np.ndarray:
        return np.nonzero(self.modality == IMAGE)[0]


def assemble(segments: Sequence[Segment]) -> MultiModalSequence:
    """Concatenate segments in order, numbering images left to right."""
    if not segments:
        raise ValueError("cannot assemble an empty segment list")
    out, mod, seg, ordn, toks = [], [], [], [], []
    n_img = 0
    for sid, s in enumerate(segments):
        if s.kind == "text":
            out.append(Segment.text(s.tokens))
            mod += [TEXT] * len(s.tokens)
            ordn += [-1] * len(s.tokens)
            toks += list(s.tokens)
        elif s.kind == "image":
            if s.n_patches <= 0:
                raise ValueError("image segment needs at least one patch")
            out.append(Segment("image", n_patches=s.n_patches, image_ordinal=n_img))
            mod += [IMAGE] * s.n_patches
            ordn += [n_img] * s.n_patches
            toks += [-1] * s.n_patches
            n_img += 1
        else:
            raise ValueError(f"unknown segment kind {s.kind!r}")
        seg += [sid] * len(s)
    if not mod:
        raise ValueError("sequence has no tokens")
    L = len(mod)
    return MultiModalSequence(out, np.array(mod, dtype=np.int8), np.array(seg, dtype=np.int64),
                              np.array(ordn, dtype=np.int64), np.array(toks, dtype=np.int64),
                              np.arange(L, dtype=np.int64))


def build_mask(seq: MultiModalSequence) -> np.ndarray:
    """Dense (L, L) boolean mask, ``allow[i, j]`` = query i may attend to key j."""
    L = seq.length
    causal = np.tril(np.ones((L, L), dtype=bool))
    o = seq.image_ordinal
    same_image = (o[:, None] == o[None, :]) & (o[:, None] >= 0)
    return causal | same_image


def rope_indices(seq: MultiModalSequence | int, offset: int = 0) -> np.ndarray:
    """One shared 1-D index stream across modalities, continuing from ``offset``."""
    L = seq if isinstance(seq, int) else seq.length
    return np.arange(offset, offset + L, dtype=np.int64)


class Block(NamedTuple):
    """Allowed attention tile: rows [r0, r1) x cols [c0, c1), lower-triangular if causal."""

    r0: int
    r1: int
    c0: int
    c1: int
    causal: bool


def mask_blocks(seq: MultiModalSequence) -> list[Block]:
    """Block-descriptor form of ``build_mask``; fully masked tiles are simply absent."""
    blocks = []
    start = 0
    for s in seq.segments:
        end = start + len(s)
        if start > 0:
            blocks.append(Block(start, end, 0, start, False))
        blocks.append(Block(start, end, start, end, s.kind == "text"))
        start = end
    return blocks


def blocks_to_dense(blocks: Sequence[Block], L: int) -> np.ndarray:
    allow = np.zeros((L, L), dtype=bool)
    for b in blocks:
        tile = np.ones((b.r1 - b.r0, b.c1 - b.c0), dtype=bool)
        if b.causal:
            rows = np.arange(b.r0, b.r1)[:, None]
            cols = np.arange(b.c0, b.c1)[None, :]
            tile = cols <= rows
        allow[b.r0:b.r1, b.c0:b.c1] |= tile
    return allow


def batch_masks(seqs: Sequence[MultiModalSequence], length: int | None = None) -> np.ndarray:
    """Stack right-padded masks into (B, L, L).

    Padding keys are never attended; a padding query attends only to itself so its
    softmax row stays defined. Padding never reaches a loss.
    """
    L = max(s.length for s in seqs) if length is None else length
    out = np.zeros((len(seqs), L, L), dtype=bool)
    out[:, np.arange(L), np.arange(L)] = True
    for b, s in enumerate(seqs):
        n = s.length
        if n > L:
            raise ValueError(f"sequence of length {n} exceeds batch length {L}")
        out[b, :n, :n] = build_mask(s)
    return out


def parse_segment_spec(spec: str) -> list[Segment]:
    """Parse a layout string such as ``t3,i4,t2,i4`` (dummy token ids for text)."""
    segments = []
    for part in spec.replace(" ", "").split(","):
        if not part:
            continue
        kind, n = part[0].lower(), part[1:]
        if kind not in "ti" or not n.isdigit() or int(n) <= 0:
            raise ValueError(f"bad segment spec {part!r}; expected e.g. t3 or i4")
        segments.append(Segment.text([0] * int(n)) if kind == "t" else Segment.image(int(n)))
    return segments


def format_mask(allow: np.ndarray) -> str:
    return "\n".join(" ".join("1" if v else "0" for v in row) for row in allow)
