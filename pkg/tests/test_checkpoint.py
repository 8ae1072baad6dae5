import json
import struct

import numpy as np
import pytest

from haplo.checkpoint import MAGIC, load_model, load_tensors, save_model, save_tensors
from haplo.model import HaploModel


def test_byte_layout(tmp_path):
    path = tmp_path / "t.ckpt"
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    b = np.array([1.5], dtype=np.float32)
    save_tensors(path, {"a": a, "b": b}, {"stage": "x", "step": 3, "config": {}})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n])
    start = 16 + n
    start += (-start) % 8
    assert start % 8 == 0
    assert manifest["stage"] == "x" and manifest["step"] == 3
    ea, eb = manifest["tensors"]
    assert (ea["name"], ea["shape"], ea["offset"], ea["nbytes"]) == ("a", [2, 3], 0, 24)
    assert (eb["offset"], eb["nbytes"]) == (24, 4)
    np.testing.assert_array_equal(np.frombuffer(raw[start:start + 24], "<f4"), a.reshape(-1))
    assert len(raw) == start + 28


def test_not_a_checkpoint(tmp_path):
    p = tmp_path / "junk"
    p.write_bytes(b"hello world, not a checkpoint")
    with pytest.raises(ValueError):
        load_tensors(p)


def test_stage1_keeps_heads_stage2_drops_them(tmp_path, cfg):
    m = HaploModel(cfg, seed=2)
    save_model(tmp_path / "s1.ckpt", m, "stage1", 7)
    save_model(tmp_path / "s2.ckpt", m, "stage2", 7)
    m1, man1 = load_model(tmp_path / "s1.ckpt")
    m2, man2 = load_model(tmp_path / "s2.ckpt")
    assert m1.heads is not None and man1["step"] == 7
    assert m2.heads is None
    assert not any(k.startswith("heads.") for k in m2.parameters())
    p0 = m.parameters()
    for k, p in m2.parameters().items():
        assert np.array_equal(p.data, p0[k].data.astype(np.float32))


def test_float32_model_round_trips_bit_exactly(tmp_path, cfg):
    cfg.precision = "float32"
    m = HaploModel(cfg, seed=4)
    save_model(tmp_path / "m.ckpt", m, "stage2")
    back, _ = load_model(tmp_path / "m.ckpt")
    for k, p in m.parameters().items():
        if not k.startswith("heads."):
            assert np.array_equal(back.parameters()[k].data, p.data)
    assert back.cfg == m.cfg
