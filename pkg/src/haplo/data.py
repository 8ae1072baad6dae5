"""Synthetic coloured-grid VQA data, a fixed word vocabulary, and interleaved batch sampling.

Each image is a g x g grid of flat colour cells. Main samples ask either which colour
sits in a cell or where a colour is; auxiliary samples are image captions or plain
counting text, and get spliced before or after a main sample.
"""

from __future__ import annotations

import hashlib
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .batch import Example
from .config import DataConfig

PAD, EOS = "<pad>", "<eos>"

PALETTE = {
    "red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0), "cyan": (0.0, 1.0, 1.0), "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0), "gray": (0.5, 0.5, 0.5), "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
BASE_WORDS = [PAD, EOS, "what", "color", "is", "row", "col", "where", "?", "colors", "count"]
NUMBERS = [str(i) for i in range(10)]


class Vocab:
    """Whitespace tokenizer over a fixed word list, padded with filler tokens to ``size``."""

    def __init__(self, colors, size: int):
        unknown = [c for c in colors if c not in PALETTE]
        if unknown:
            raise ValueError(f"no palette entry for colours {unknown}")
        words = BASE_WORDS + NUMBERS + list(colors)
        if len(words) > size:
            raise ValueError(f"vocabulary of size {size} cannot hold the {len(words)} required words")
        self.words = words + [f"<w{i}>" for i in range(len(words), size)]
        self.index = {w: i for i, w in enumerate(self.words)}
        self.colors = tuple(colors)

    def __len__(self):
        return len(self.words)

    @property
    def eos(self) -> int:
        return self.index[EOS]

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[w] for w in text.split()]
        except KeyError as e:
            raise KeyError(f"word {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        return " ".join(self.words[int(i)] for i in ids)


@dataclass
class ToySample:
    image: np.ndarray | None
    question: list[int]
    answer: list[int]          # ends with EOS
    role: str                  # "main" or "auxiliary"
    kind: str                  # color | where | caption | count
    meta: dict = field(default_factory=dict)

    def prompt_parts(self):
        parts = [] if self.image is None else [self.image]
        return parts + [(self.question, False)]

    def parts(self):
        return self.prompt_parts() + [(self.answer, True)]


def cell_bounds(size: int, g: int) -> np.ndarray:
    return np.round(np.linspace(0, size, g + 1)).astype(int)


def render(layout, g: int, size: int, noise: float, rng: np.random.Generator) -> np.ndarray:
    b = cell_bounds(size, g)
    img = np.zeros((size, size, 3))
    for idx, color in enumerate(layout):
        r, c = divmod(idx, g)
        img[b[r]:b[r + 1], b[c]:b[c + 1]] = PALETTE[color]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def cell_patch_block(row: int, col: int, g: int, size: int, patch: int) -> list[int]:
    """Raster patch indices whose centre pixel lies inside cell (row, col)."""
    b = cell_bounds(size, g)
    n = size // patch
    centers = np.arange(n) * patch + patch / 2.0
    rows = [i for i in range(n) if b[row] <= centers[i] < b[row + 1]]
    cols = [j for j in range(n) if b[col] <= centers[j] < b[col + 1]]
    return [i * n + j for i in rows for j in cols]


def layout_is_heldout(layout, fraction: float) -> bool:
    key = zlib.crc32(",".join(layout).encode())
    return (key % 10000) < fraction * 10000


def _sample_layout(rng, colors, g):
    n = g * g
    if len(colors) >= n:
        return tuple(colors[i] for i in rng.permutation(len(colors))[:n])
    return tuple(colors[i] for i in rng.integers(0, len(colors), size=n))


def _main_sample(rng, layout, g, size, noise, vocab: Vocab) -> ToySample:
    image = render(layout, g, size, noise, rng)
    unique = [c for c in layout if layout.count(c) == 1]
    if unique and rng.random() < 0.5:
        color = unique[int(rng.integers(len(unique)))]
        r, c = divmod(layout.index(color), g)
        q, a, kind = f"where is {color} ?", f"row {r} col {c} {EOS}", "where"
    else:
        cell = int(rng.integers(g * g))
        r, c = divmod(cell, g)
        color = layout[cell]
        q, a, kind = f"what color is row {r} col {c} ?", f"{color} {EOS}", "color"
    return ToySample(image, vocab.encode(q), vocab.encode(a), "main", kind,
                     {"layout": list(layout), "row": r, "col": c, "color": color})


def synth_dataset(seed: int, n_samples: int, grid: int, vocab: Vocab, *, split: str = "train",
                  image_size: int = 28, noise: float = 0.05, heldout_fraction: float = 0.2,
                  colors=None) -> list[ToySample]:
    """Deterministic list of main VQA samples drawn from the requested layout split."""
    if grid < 2:
        raise ValueError(f"grid must be at least 2, got {grid}")
    if split not in ("train", "heldout"):
        raise ValueError(f"unknown split {split!r}")
    colors = tuple(colors or vocab.colors)
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    want_heldout = split == "heldout"
    out = []
    while len(out) < n_samples:
        layout = _sample_layout(rng, colors, grid)
        if layout_is_heldout(layout, heldout_fraction) != want_heldout:
            continue
        out.append(_main_sample(rng, layout, grid, image_size, noise, vocab))
    return out


def aux_sample(rng: np.random.Generator, cfg: DataConfig, vocab: Vocab, image_size: int,
               image_prob: float = 0.5) -> ToySample:
    """A caption (image + its colours in raster order) or a counting snippet."""
    if rng.random() < image_prob:
        layout = _sample_layout(rng, cfg.colors, cfg.grid)
        image = render(layout, cfg.grid, image_size, cfg.pixel_noise, rng)
        return ToySample(image, vocab.encode("colors"), vocab.encode(" ".join(layout) + f" {EOS}"),
                         "auxiliary", "caption", {"layout": list(layout)})
    start = int(rng.integers(0, 6))
    q = f"count {start}"
    a = " ".join(str(start + i) for i in range(1, 4)) + f" {EOS}"
    return ToySample(None, vocab.encode(q), vocab.encode(a), "auxiliary", "count", {"start": start})


class BatchSampler:
    """Draws batches mixing main-only rows with <aux, main> / <main, aux> pairs."""

    def __init__(self, samples: list[ToySample], cfg: DataConfig, vocab: Vocab, n_patches: int,
                 image_size: int, seed: int):
        self.samples = samples
        self.cfg = cfg
        self.vocab = vocab
        self.n_patches = n_patches
        self.image_size = image_size
        self.rng = np.random.default_rng(seed)

    def example(self) -> Example:
        main = self.samples[int(self.rng.integers(len(self.samples)))]
        if self.rng.random() >= self.cfg.interleave_ratio:
            return Example.from_parts(main.parts(), self.n_patches)
        aux = aux_sample(self.rng, self.cfg, self.vocab, self.image_size)
        pair = [aux, main] if self.rng.random() < 0.5 else [main, aux]
        return Example.from_parts(pair[0].parts() + pair[1].parts(), self.n_patches)

    def __call__(self, batch_size: int) -> list[Example]:
        return [self.example() for _ in range(batch_size)]


def build_splits(cfg: DataConfig, vocab: Vocab, image_size: int):
    train = synth_dataset(cfg.seed, cfg.n_train, cfg.grid, vocab, split="train",
                          image_size=image_size, noise=cfg.pixel_noise,
                          heldout_fraction=cfg.heldout_fraction, colors=cfg.colors)
    held = synth_dataset(cfg.seed, cfg.n_heldout, cfg.grid, vocab, split="heldout",
                         image_size=image_size, noise=cfg.pixel_noise,
                         heldout_fraction=cfg.heldout_fraction, colors=cfg.colors)
    return train, held


def dataset_digest(samples: list[ToySample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        if s.image is not None:
            h.update(np.ascontiguousarray(s.image, dtype=np.float64).tobytes())
        h.update(json.dumps([s.question, s.answer, s.role, s.kind, s.meta], sort_keys=True).encode())
    return h.hexdigest()


def save_dataset(path: str | Path, samples: list[ToySample], vocab: Vocab) -> None:
    """npz container: float32 images plus a JSON document with questions, answers and words."""
    images = np.stack([s.image for s in samples]).astype(np.float32)
    meta = [{k: v for k, v in asdict(s).items() if k != "image"} for s in samples]
    doc = json.dumps({"vocab": vocab.words, "samples": meta})
    np.savez_compressed(path, images=images, meta=np.frombuffer(doc.encode(), dtype=np.uint8))


def load_dataset(path: str | Path) -> tuple[list[ToySample], list[str]]:
    with np.load(path) as z:
        images = z["images"].astype(np.float64)
        doc = json.loads(z["meta"].tobytes().decode())
    samples = [ToySample(image=img, **m) for img, m in zip(images, doc["samples"])]
    return samples, doc["vocab"]
