"""Packing multimodal examples into right-padded batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embeddings import normalize_pixels
from .masking import IMAGE, TEXT, MultiModalSequence, Segment, assemble, batch_masks


@dataclass
class Example:
    """One training/eval sequence: segments, raw [0, 1] images, and answer flags per position."""

    segments: list[Segment]
    images: list[np.ndarray]
    answer_mask: np.ndarray

    @classmethod
    def from_parts(cls, parts, n_patches: int) -> Example:
        """Build from image arrays and ``(tokens, is_answer)`` text pairs, in order.

        Adjacent text parts merge into one text segment.
        """
        segments, images, flags = [], [], []
        pending: list[int] = []
        for part in parts:
            if isinstance(part, np.ndarray):
                if pending:
                    segments.append(Segment.text(pending))
                    pending = []
                images.append(part)
                segments.append(Segment.image(n_patches))
                flags.append(np.zeros(n_patches, dtype=bool))
            else:
                tokens, is_answer = part
                pending += [int(t) for t in tokens]
                flags.append(np.full(len(tokens), bool(is_answer)))
        if pending:
            segments.append(Segment.text(pending))
        return cls(segments, images, np.concatenate(flags) if flags else np.zeros(0, dtype=bool))


@dataclass
class Batch:
    seqs: list[MultiModalSequence]
    images: np.ndarray        # (n_img, H, W, C), already normalized
    source: np.ndarray        # (B, L) row index into [image rows; text rows; zero pad row]
    token_ids: np.ndarray     # (B, L), -1 for image and padding positions
    valid: np.ndarray         # (B, L)
    mask: np.ndarray          # (B, L, L)
    positions: np.ndarray     # (L,)
    image_flat: np.ndarray    # flat (b*L + i) positions of image rows, pool order
    text_flat: np.ndarray     # flat positions of text rows, pool order
    text_ids: np.ndarray      # token id of each text row
    answer: np.ndarray        # (B, L) True where the token is an answer (NTP target)

    @property
    def shape(self) -> tuple[int, int]:
        return self.source.shape

    @property
    def n_image_rows(self) -> int:
        return len(self.image_flat)


def collate(examples: list[Example], n_patches: int, length: int | None = None) -> Batch:
    seqs, answers, images = [], [], []
    for ex in examples:
        seq = assemble(ex.segments)
        ans = ex.answer_mask
        if any(s.kind == "image" and s.n_patches != n_patches for s in ex.segments):
            raise ValueError(f"image segments must carry {n_patches} patches")
        if len(ans) != seq.length:
            raise ValueError("answer mask length does not match sequence length")
        seqs.append(seq)
        answers.append(ans)
        images.extend(ex.images)
    B = len(seqs)
    L = max(s.length for s in seqs) if length is None else length
    n_img = len(images)
    n_img_rows = n_img * n_patches
    text_ids = np.concatenate([s.token_ids[s.modality == TEXT] for s in seqs]) if seqs else np.zeros(0)
    pad_row = n_img_rows + len(text_ids)

    source = np.full((B, L), pad_row, dtype=np.int64)
    token_ids = np.full((B, L), -1, dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    answer = np.zeros((B, L), dtype=bool)
    image_flat = np.zeros(n_img_rows, dtype=np.int64)
    text_flat = np.zeros(len(text_ids), dtype=np.int64)
    img_cursor = txt_cursor = 0
    for b, (seq, ans) in enumerate(zip(seqs, answers)):
        n = seq.length
        valid[b, :n] = True
        answer[b, :n] = ans
        token_ids[b, :n] = seq.token_ids
        for i in range(n):
            if seq.modality[i] == IMAGE:
                source[b, i] = img_cursor
                image_flat[img_cursor] = b * L + i
                img_cursor += 1
            else:
                source[b, i] = n_img_rows + txt_cursor
                text_flat[txt_cursor] = b * L + i
                txt_cursor += 1
    imgs = (normalize_pixels(np.stack(images)) if images
            else np.zeros((0, 1, 1, 1)))
    return Batch(seqs, imgs, source, token_ids, valid, batch_masks(seqs, L),
                 np.arange(L, dtype=np.int64), image_flat, text_flat,
                 text_ids.astype(np.int64), answer)
