from collections import Counter

import numpy as np
import pytest

from haplo.config import DataConfig
from haplo.data import (PALETTE, BatchSampler, Vocab, build_splits, cell_patch_block, dataset_digest,
                        load_dataset, save_dataset, synth_dataset)

COLORS = ("red", "green", "blue", "yellow", "cyan", "magenta")


@pytest.fixture(scope="module")
def vocab():
    return Vocab(COLORS, 64)


def test_same_seed_same_hash(vocab):
    a = synth_dataset(3, 50, 2, vocab)
    b = synth_dataset(3, 50, 2, vocab)
    assert dataset_digest(a) == dataset_digest(b)
    assert dataset_digest(synth_dataset(4, 50, 2, vocab)) != dataset_digest(a)


def test_grid_must_be_at_least_two(vocab):
    with pytest.raises(ValueError, match="grid"):
        synth_dataset(0, 5, 1, vocab)


def test_vocab_too_small():
    with pytest.raises(ValueError, match="cannot hold"):
        Vocab(COLORS, 10)


def test_vocab_round_trip(vocab):
    text = "what color is row 1 col 0 ?"
    assert vocab.decode(vocab.encode(text)) == text
    with pytest.raises(KeyError, match="purple"):
        vocab.encode("purple")


def test_grid3_covers_all_position_color_facts(vocab):
    samples = synth_dataset(0, 3000, 3, vocab, heldout_fraction=0.0, image_size=27)
    facts = {(s.meta["row"], s.meta["col"], s.meta["color"]) for s in samples if s.kind == "color"}
    assert len(facts) == 9 * 6


def _read_cell(image, row, col, g):
    """Average the middle half of a cell and snap to the nearest palette colour."""
    size = image.shape[0]
    lo_r, hi_r = row * size // g, (row + 1) * size // g
    lo_c, hi_c = col * size // g, (col + 1) * size // g
    qr, qc = (hi_r - lo_r) // 4, (hi_c - lo_c) // 4
    mean = image[lo_r + qr:hi_r - qr, lo_c + qc:hi_c - qc].reshape(-1, 3).mean(0)
    return min(COLORS, key=lambda c: np.sum((np.array(PALETTE[c]) - mean) ** 2))


@pytest.mark.parametrize("g", [2, 3])
def test_answer_oracle_audit(vocab, g):
    samples = synth_dataset(1, 1000, g, vocab, image_size=28 if g == 2 else 27)
    for s in samples:
        words = vocab.decode(s.question).split()
        answer = vocab.decode(s.answer).split()
        assert answer[-1] == "<eos>"
        if words[0] == "what":
            r, c = int(words[4]), int(words[6])
            assert answer[:-1] == [_read_cell(s.image, r, c, g)]
        else:
            color = words[2]
            cells = [(r, c) for r in range(g) for c in range(g) if _read_cell(s.image, r, c, g) == color]
            assert len(cells) == 1
            assert answer[:-1] == ["row", str(cells[0][0]), "col", str(cells[0][1])]


def test_splits_are_disjoint_by_layout(vocab):
    cfg = DataConfig(n_train=400, n_heldout=100)
    train, held = build_splits(cfg, vocab, 28)
    tl = {tuple(s.meta["layout"]) for s in train}
    hl = {tuple(s.meta["layout"]) for s in held}
    assert not tl & hl


def test_answers_roughly_balanced(vocab):
    samples = synth_dataset(2, 3000, 2, vocab)
    colors = Counter(s.meta["color"] for s in samples if s.kind == "color")
    cells = Counter((s.meta["row"], s.meta["col"]) for s in samples)
    for counts in (colors, cells):
        mean = np.mean(list(counts.values()))
        assert all(abs(v - mean) < 0.25 * mean for v in counts.values())
    kinds = Counter(s.kind for s in samples)
    assert set(kinds) == {"color", "where"}


def test_interleaving_produces_both_orders(vocab):
    cfg = DataConfig(interleave_ratio=1.0)
    samples = synth_dataset(0, 50, 2, vocab)
    sampler = BatchSampler(samples, cfg, vocab, 16, 28, seed=0)
    aux_first = main_first = 0
    for ex in sampler(200):
        first_text = next(s for s in ex.segments if s.kind == "text")
        word = vocab.words[first_text.tokens[0]]
        if word in ("colors", "count"):
            aux_first += 1
        else:
            main_first += 1
        assert ex.answer_mask.sum() > 0
    assert aux_first > 50 and main_first > 50


def test_interleave_ratio_zero_is_main_only(vocab):
    sampler = BatchSampler(synth_dataset(0, 20, 2, vocab), DataConfig(interleave_ratio=0.0),
                           vocab, 16, 28, seed=0)
    assert all(sum(s.kind == "image" for s in ex.segments) == 1 for ex in sampler(30))


def test_cell_patch_blocks():
    assert cell_patch_block(0, 0, 2, 28, 7) == [0, 1, 4, 5]
    assert cell_patch_block(1, 1, 2, 28, 7) == [10, 11, 14, 15]
    blocks = [cell_patch_block(r, c, 2, 28, 7) for r in range(2) for c in range(2)]
    assert sorted(sum(blocks, [])) == list(range(16))


def test_dataset_file_round_trip(tmp_path, vocab):
    samples = synth_dataset(5, 10, 2, vocab)
    save_dataset(tmp_path / "d.npz", samples, vocab)
    back, words = load_dataset(tmp_path / "d.npz")
    assert words == vocab.words
    for a, b in zip(samples, back):
        assert a.question == b.question and a.answer == b.answer and a.meta == b.meta
        np.testing.assert_allclose(a.image, b.image, atol=1e-7)
