"""Single-file checkpoint container.

Layout (all integers little-endian)::

    bytes 0..7    magic b"HAPLOCK1"
    bytes 8..15   uint64 N, length of the JSON manifest
    next N bytes  UTF-8 JSON manifest
    zero padding  up to the next multiple of 8
    data section  raw little-endian float32 blobs, back to back

The manifest holds ``config``, ``stage``, ``step``, any extra metadata, and a
``tensors`` list of ``{name, shape, offset, nbytes}`` with offsets relative to the
start of the data section, in the order the blobs are written.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .nn import Module

MAGIC = b"HAPLOCK1"
BLOB_DTYPE = np.dtype("<f4")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    entries, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                        "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = dict(meta, format="haplo-checkpoint", version=1, dtype="<f4", tensors=entries)
    head = json.dumps(manifest, sort_keys=True).encode()
    pad = (-(16 + len(head))) % 8
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(b"\0" * pad)
        for blob in blobs:
            f.write(blob)


def load_tensors(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint container")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16:16 + n].decode())
    start = 16 + n + ((-(16 + n)) % 8)
    tensors = {}
    for e in manifest["tensors"]:
        lo = start + e["offset"]
        arr = np.frombuffer(raw[lo:lo + e["nbytes"]], dtype=BLOB_DTYPE)
        tensors[e["name"]] = arr.reshape(e["shape"]).copy()
    return manifest, tensors


def save_model(path: str | Path, model: Module, stage: str, step: int = 0, **extra) -> None:
    """Write a model checkpoint. Stage-2 checkpoints never carry the stage-1 heads."""
    params = {k: p.data for k, p in model.named_parameters()}
    if stage != "stage1":
        params = {k: v for k, v in params.items() if not k.startswith("heads.")}
    cfg = getattr(model, "cfg", None)
    meta = {"config": vars(cfg) if cfg is not None else {}, "stage": stage, "step": int(step)}
    meta.update(extra)
    save_tensors(path, params, meta)


def load_model(path: str | Path, dtype=None):
    """Rebuild a HaploModel from a checkpoint; heads are present only in stage-1 checkpoints."""
    from .model import HaploModel

    manifest, tensors = load_tensors(path)
    cfg = ModelConfig(**manifest["config"])
    if dtype is not None:
        cfg.precision = np.dtype(dtype).name
    has_heads = any(k.startswith("heads.") for k in tensors)
    model = HaploModel(cfg, seed=0, with_heads=has_heads)
    assign(model, tensors)
    return model, manifest


def assign(module: Module, tensors: dict[str, np.ndarray]) -> None:
    params = module.parameters()
    missing = set(params) - set(tensors)
    unexpected = set(tensors) - set(params)
    if missing or unexpected:
        raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
    for name, p in params.items():
        arr = tensors[name]
        if arr.shape != p.shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
        p.data = arr.astype(p.dtype)
