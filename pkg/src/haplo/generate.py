"""Autoregressive decoding, toy VQA evaluation, and attention-map dumps."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .batch import Example, collate
from .data import ToySample, Vocab, cell_patch_block
from .masking import IMAGE, TEXT, mask_blocks
from .model import HaploModel, LayerCache


@dataclass
class SamplingConfig:
    """``temperature <= 0`` or ``greedy=True`` means argmax decoding."""

    greedy: bool = True
    temperature: float = 1.0
    top_k: int = 0
    max_new_tokens: int = 8
    seed: int = 0


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max()
    return z - np.log(np.exp(z).sum())


class DecodeSession:
    """Incremental decoding over one prompt with per-layer key/value caches."""

    def __init__(self, model: HaploModel, sampling: SamplingConfig | None = None,
                 eos_id: int | None = None, use_cache: bool = True):
        self.model = model
        self.sampling = sampling or SamplingConfig()
        self.eos_id = eos_id
        self.use_cache = use_cache
        self.rng = np.random.default_rng(self.sampling.seed)
        self.reset()

    def reset(self) -> None:
        self.pre_caches = [LayerCache() for _ in self.model.pre_blocks]
        self.post_caches = [LayerCache() for _ in self.model.post_blocks]
        self.length = 0
        self._prompt: Example | None = None
        self._generated: list[int] = []

    @property
    def cache_length(self) -> int:
        caches = self.pre_caches + self.post_caches
        return caches[0].length if caches else self.length

    # ---- forward passes -------------------------------------------------------
    def prefill(self, prompt: Example) -> np.ndarray:
        """Run the prompt; returns the next-token logits after its last position."""
        n = len(prompt.answer_mask)
        max_len = self.model.cfg.max_len
        if n > max_len:
            raise ValueError(f"prompt of length {n} exceeds the maximum sequence length {max_len}")
        if n == 0:
            raise ValueError("empty prompt")
        self.reset()
        self._prompt = prompt
        if not self.use_cache:
            self.length = n
            return self._recompute()
        m = self.model
        batch = collate([prompt], m.cfg.n_patches)
        batch.images = batch.images.astype(m.cfg.dtype)
        blocks = mask_blocks(batch.seqs[0])
        with ad.no_grad():
            H = m.pre_decode(m.embed(batch), batch.mask, batch.positions, self.pre_caches, blocks=blocks)
            logits = m.post_decode(m.connect(H), batch.mask, batch.positions, self.post_caches, blocks)
        self.length = n
        return logits.data[0, -1]

    def step(self, token: int) -> np.ndarray:
        """Append one text token; returns the logits that score the following token."""
        if self.length >= self.model.cfg.max_len:
            raise ValueError(f"sequence already at the maximum length {self.model.cfg.max_len}")
        self._generated.append(int(token))
        if not self.use_cache:
            self.length += 1
            return self._recompute()
        m = self.model
        pos = np.array([self.length], dtype=np.int64)
        mask = np.ones((1, 1, self.length + 1), dtype=bool)
        with ad.no_grad():
            H = m.pre_decode(m.embed_tokens([token]), mask, pos, self.pre_caches)
            logits = m.post_decode(m.connect(H), mask, pos, self.post_caches)
        self.length += 1
        return logits.data[0, -1]

    def _recompute(self) -> np.ndarray:
        ex = extend(self._prompt, self._generated, self.model.cfg.n_patches)
        batch = collate([ex], self.model.cfg.n_patches)
        batch.images = batch.images.astype(self.model.cfg.dtype)
        with ad.no_grad():
            return self.model(batch).data[0, -1]

    # ---- sampling ----------------------------------------------------------------
    def choose(self, logits: np.ndarray) -> int:
        s = self.sampling
        if s.greedy or s.temperature <= 0:
            return int(np.argmax(logits))
        z = logits.astype(np.float64) / s.temperature
        if s.top_k and s.top_k < len(z):
            cut = np.partition(z, -s.top_k)[-s.top_k]
            z = np.where(z >= cut, z, -np.inf)
        p = np.exp(z - z.max())
        return int(self.rng.choice(len(p), p=p / p.sum()))

    def generate(self, prompt: Example) -> tuple[list[int], list[float]]:
        """Tokens until EOS (kept) or the budget runs out, with each token's log-prob."""
        out, logps = [], []
        if self.sampling.max_new_tokens <= 0:
            return out, logps
        logits = self.prefill(prompt)
        while True:
            tok = self.choose(logits)
            out.append(tok)
            logps.append(float(_log_softmax(logits.astype(np.float64))[tok]))
            if tok == self.eos_id or len(out) >= self.sampling.max_new_tokens:
                break
            if self.length >= self.model.cfg.max_len:
                break
            logits = self.step(tok)
        return out, logps


def extend(prompt: Example, tokens, n_patches: int) -> Example:
    """The prompt with ``tokens`` appended as answer text."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        return prompt
    parts = []
    img = iter(prompt.images)
    for seg in prompt.segments:
        parts.append(next(img) if seg.kind == "image" else (list(seg.tokens), False))
    flags = prompt.answer_mask
    ex = Example.from_parts(parts + [(tokens, True)], n_patches)
    ex.answer_mask[:len(flags)] = flags
    return ex


def prompt_example(sample: ToySample, n_patches: int) -> Example:
    return Example.from_parts(sample.prompt_parts(), n_patches)


def generate(model: HaploModel, prompt: Example, sampling: SamplingConfig | None = None,
             eos_id: int | None = None, use_cache: bool = True) -> list[int]:
    return DecodeSession(model, sampling, eos_id, use_cache).generate(prompt)[0]


def sequence_log_likelihood(model: HaploModel, prompt: Example, tokens) -> float:
    """Teacher-forced sum of log p(token_i | prompt, tokens_<i) from one full forward pass."""
    tokens = [int(t) for t in tokens]
    if not tokens:
        return 0.0
    n = len(prompt.answer_mask)
    ex = extend(prompt, tokens, model.cfg.n_patches)
    batch = collate([ex], model.cfg.n_patches)
    batch.images = batch.images.astype(model.cfg.dtype)
    with ad.no_grad():
        logits = model(batch).data[0].astype(np.float64)
    total = 0.0
    for i, tok in enumerate(tokens):
        total += _log_softmax(logits[n - 1 + i])[tok]
    return float(total)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    accuracy: float
    n: int
    per_task: dict = field(default_factory=dict)
    color_confusion: dict = field(default_factory=dict)     # expected colour -> predicted -> count
    position_counts: dict = field(default_factory=dict)     # "r,c" -> [correct, total]
    mean_answer_length: float = 0.0
    failures: list = field(default_factory=list)

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text


def eval_toy_vqa(model: HaploModel, samples: list[ToySample], vocab: Vocab,
                 max_new_tokens: int = 8, keep_failures: int = 20) -> EvalReport:
    """Greedy exact-match accuracy, answers compared up to and including EOS."""
    sampling = SamplingConfig(max_new_tokens=max_new_tokens)
    task_hits: dict = defaultdict(lambda: [0, 0])
    confusion: dict = defaultdict(lambda: defaultdict(int))
    positions: dict = defaultdict(lambda: [0, 0])
    lengths, failures, hits = [], [], 0
    session = DecodeSession(model, sampling, vocab.eos)
    for s in samples:
        pred, _ = session.generate(prompt_example(s, model.cfg.n_patches))
        ok = pred == list(s.answer)
        hits += ok
        lengths.append(len(pred))
        task_hits[s.kind][0] += ok
        task_hits[s.kind][1] += 1
        key = f"{s.meta.get('row')},{s.meta.get('col')}"
        positions[key][0] += ok
        positions[key][1] += 1
        if s.kind == "color":
            said = vocab.words[pred[0]] if pred else ""
            confusion[s.meta["color"]][said] += 1
        if not ok and len(failures) < keep_failures:
            failures.append({"question": vocab.decode(s.question), "answer": vocab.decode(s.answer),
                             "predicted": vocab.decode(pred)})
    n = len(samples)
    return EvalReport(
        accuracy=hits / n if n else 0.0, n=n,
        per_task={k: v[0] / v[1] for k, v in task_hits.items()},
        color_confusion={k: dict(v) for k, v in confusion.items()},
        position_counts={k: list(v) for k, v in positions.items()},
        mean_answer_length=float(np.mean(lengths)) if lengths else 0.0,
        failures=failures)


# ---------------------------------------------------------------------------
# attention maps
# ---------------------------------------------------------------------------

def word_attention(model: HaploModel, prompt: Example, vocab: Vocab, words, layer: int | None,
                   per_head: bool = False) -> dict[str, np.ndarray]:
    """Attention from each query word (first occurrence) to the first image's patches.

    ``layer=None`` averages the pre-decoder layers.
    """
    batch = collate([prompt], model.cfg.n_patches)
    batch.images = batch.images.astype(model.cfg.dtype)
    seq = batch.seqs[0]
    text_pos = np.flatnonzero(seq.modality == TEXT)
    tokens = [vocab.words[t] for t in seq.token_ids[text_pos]]
    missing = [w for w in words if w not in tokens]
    if missing:
        raise KeyError(f"words {missing} not in prompt tokens {tokens}")
    depth = len(model.pre_blocks)
    if layer is not None and not 0 <= layer < depth:
        raise IndexError(f"layer {layer} out of range for {depth} pre-decoder layers")
    layers = range(depth) if layer is None else [layer]
    img_pos = np.flatnonzero((seq.modality == IMAGE) & (seq.image_ordinal == 0))
    with ad.no_grad():
        model.pre_decode(model.embed(batch), batch.mask, batch.positions, capture=True)
    out = {}
    for w in words:
        q = int(text_pos[tokens.index(w)])
        maps = [model.attention_map(i, [q], img_pos, per_head=per_head)[..., 0, :] for i in layers]
        out[w] = np.mean(maps, axis=0)
    return out


def write_pgm(path: str | Path, grid: np.ndarray, scale: int = 16) -> None:
    """Binary 8-bit PGM, max-normalized and nearest-neighbour upscaled."""
    g = np.asarray(grid, dtype=np.float64)
    top = g.max()
    img = np.zeros_like(g) if top <= 0 else g / top
    img = np.kron((img * 255).round().astype(np.uint8), np.ones((scale, scale), dtype=np.uint8))
    with open(path, "wb") as f:
        f.write(f"P5 {img.shape[1]} {img.shape[0]} 255\n".encode())
        f.write(img.tobytes())


def dump_attention(model: HaploModel, prompt: Example, vocab: Vocab, words, layer: int | None,
                   out_dir: str | Path, per_head: bool = False) -> dict[str, np.ndarray]:
    """CSV of word -> patch attention plus one PGM heatmap strip (words side by side)."""
    maps = word_attention(model, prompt, vocab, words, layer, per_head)
    tag = "mean" if layer is None else str(layer)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    side = model.cfg.grid
    with open(out / f"attention_layer{tag}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        n = model.cfg.n_patches
        if per_head:
            w.writerow(["word", "head"] + [f"p{i}" for i in range(n)])
            for word, m in maps.items():
                for h, row in enumerate(m):
                    w.writerow([word, h] + [f"{x:.6g}" for x in row])
        else:
            w.writerow(["word"] + [f"p{i}" for i in range(n)])
            for word, row in maps.items():
                w.writerow([word] + [f"{x:.6g}" for x in row])
    grids = [(m.mean(axis=0) if per_head else m).reshape(side, side) for m in maps.values()]
    gap = np.zeros((side, 1))
    strip = np.concatenate([x for g in grids for x in (g / max(g.max(), 1e-12), gap)][:-1], axis=1)
    write_pgm(out / f"attention_layer{tag}.pgm", strip)
    return maps


def localization_probes(model: HaploModel, samples: list[ToySample], vocab: Vocab,
                        layer: int | None = None) -> dict:
    """For "where is COLOR ?" prompts: does the colour word's attention peak inside its cell?

    By default the map is averaged over heads and pre-decoder layers.
    """
    cfg = model.cfg
    probes = [s for s in samples if s.kind == "where"]
    hits = 0
    for s in probes:
        att = word_attention(model, prompt_example(s, cfg.n_patches), vocab, [s.meta["color"]], layer)
        g = int(round(np.sqrt(len(s.meta["layout"]))))
        cell = cell_patch_block(s.meta["row"], s.meta["col"], g, cfg.image_size, cfg.patch)
        hits += int(np.argmax(att[s.meta["color"]])) in cell
    return {"probes": len(probes), "hits": hits, "rate": hits / len(probes) if probes else 0.0,
            "layer": "mean" if layer is None else layer}
