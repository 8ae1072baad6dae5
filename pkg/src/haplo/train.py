"""Stage-1 distillation, stage-2 full fine-tuning, and the comparison/retention experiments."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .batch import Batch, Example, collate
from .checkpoint import save_model, save_tensors
from .config import OptimConfig, TrainConfig
from .data import BatchSampler, Vocab, build_splits
from .embeddings import StageOneHeads, StateError
from .losses import ctp_loss, feature_loss, ntp_loss, vision_loss
from .model import HaploModel, VisionTeacher
from .optim import AdamW, clip_grad_norm, lr_at

log = logging.getLogger(__name__)

STAGE1_COLUMNS = ["step", "L_v", "L_feat", "L_ctp", "L_total", "tau", "lr"]
STAGE2_COLUMNS = ["step", "loss", "lr"]


class TrainingError(RuntimeError):
    pass


def make_vocab(cfg: TrainConfig) -> Vocab:
    return Vocab(cfg.data.colors, cfg.model.vocab)


def build_teacher(cfg: TrainConfig) -> VisionTeacher:
    return VisionTeacher(cfg.model, cfg.teacher_seed)


def new_model(cfg: TrainConfig, teacher: VisionTeacher | None = None, inherit: bool | None = None,
              seed: int | None = None) -> HaploModel:
    model = HaploModel(cfg.model, seed=cfg.seed if seed is None else seed)
    inherit = cfg.init_from_teacher if inherit is None else inherit
    if inherit:
        model.inherit_from(teacher if teacher is not None else build_teacher(cfg))
    return model


# ---------------------------------------------------------------------------
# stage 1
# ---------------------------------------------------------------------------

def stage1_losses(model: HaploModel, teacher: VisionTeacher, batch: Batch,
                  vision_weight: float = 1.0, text_weight: float = 1.0) -> dict[str, ad.Tensor]:
    """Pre-decoder only: the connector and post-decoder are not part of this graph."""
    H = model.pre_decode(model.embed(batch), batch.mask, batch.positions)
    H_v, H_t = model.split_by_modality(H, batch)
    Hv_hat, Ht_hat = model.apply_heads(H_v, H_t)
    zero = ad.Tensor(np.zeros((), dtype=H.dtype))
    L_v = vision_loss(Hv_hat, teacher(batch.images)) if batch.n_image_rows else zero
    if len(batch.text_ids):
        W = model.text.W
        T_t = W.data[batch.text_ids]
        L_feat = feature_loss(Ht_hat, T_t)
        L_ctp = ctp_loss(Ht_hat, batch.text_ids, W, model.heads.temperature())
    else:
        L_feat = L_ctp = zero
    total = L_v * vision_weight + (L_feat + L_ctp) * text_weight
    return {"L_v": L_v, "L_feat": L_feat, "L_ctp": L_ctp, "L_total": total}


def stage1_trainable(model: HaploModel) -> dict[str, ad.Tensor]:
    if model.heads is None:
        raise StateError("stage 1 needs the distillation heads")
    params = model.pre_decoder_parameters()
    params.update({"heads." + k: p for k, p in model.heads.named_parameters()})
    return params


def stage2_trainable(model: HaploModel, train_embeddings: bool = True) -> dict[str, ad.Tensor]:
    params = {k: p for k, p in model.named_parameters() if not k.startswith("heads.")}
    if not train_embeddings:
        params.pop("text.W")
    return params


def _check_finite(value: float, step: int, stage: str, parts: dict) -> None:
    if not math.isfinite(value):
        detail = ", ".join(f"{k}={float(v.data) if isinstance(v, ad.Tensor) else v}"
                           for k, v in parts.items())
        raise TrainingError(f"{stage}: non-finite loss at step {step} ({detail})")


@dataclass
class Stage:
    """One optimization stage: owns the optimizer and the step counter."""

    model: HaploModel
    params: dict[str, ad.Tensor]
    optim_cfg: OptimConfig
    opt: AdamW = field(init=False)
    step: int = 0

    def __post_init__(self):
        o = self.optim_cfg
        self.opt = AdamW(self.params, o.lr, (o.beta1, o.beta2), o.eps, o.weight_decay)

    def lr(self) -> float:
        o = self.optim_cfg
        return lr_at(self.step, o.lr, o.warmup, o.steps)

    def apply(self) -> float:
        lr = self.lr()
        clip_grad_norm(self.params, self.optim_cfg.grad_clip)
        self.opt.step(lr)
        self.step += 1
        return lr


def prepare_stage1(model: HaploModel, cfg: TrainConfig) -> Stage:
    model.text.freeze(True)
    return Stage(model, stage1_trainable(model), cfg.stage1)


def stage1_step(stage: Stage, teacher: VisionTeacher, batch: Batch, cfg: TrainConfig) -> dict:
    model = stage.model
    stage.opt.zero_grad()
    model.text.W.grad = None
    parts = stage1_losses(model, teacher, batch, cfg.vision_weight, cfg.text_weight)
    total = parts["L_total"]
    _check_finite(float(total.data), stage.step, "stage1", parts)
    total.backward()
    if model.text.W.grad is not None and np.any(model.text.W.grad):
        raise TrainingError("embedding matrix received gradient during stage 1")
    step = stage.step
    lr = stage.apply()
    model.heads.clamp_temperature()
    row = {k: float(v.data) for k, v in parts.items()}
    row.update(step=step, tau=float(model.heads.temperature().data), lr=lr)
    return row


# ---------------------------------------------------------------------------
# stage 2
# ---------------------------------------------------------------------------

def prepare_stage2(model: HaploModel, cfg: TrainConfig) -> Stage:
    model.drop_heads()
    model.text.freeze(not cfg.train_embeddings_stage2)
    return Stage(model, stage2_trainable(model, cfg.train_embeddings_stage2), cfg.stage2)


def stage2_loss(model: HaploModel, batch: Batch) -> ad.Tensor:
    if model.heads is not None:
        raise StateError("stage 2 runs without the distillation heads")
    return ntp_loss(model(batch), batch.token_ids, batch.answer)


def stage2_step(stage: Stage, batch: Batch) -> dict:
    stage.opt.zero_grad()
    loss = stage2_loss(stage.model, batch)
    _check_finite(float(loss.data), stage.step, "stage2", {"loss": loss})
    if loss.requires_grad:
        loss.backward()
    step = stage.step
    lr = stage.apply()
    return {"step": step, "loss": float(loss.data), "lr": lr}


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------

def grad_audit(model: HaploModel, declared: dict[str, ad.Tensor]) -> tuple[set[str], set[str]]:
    """Returns (undeclared params holding nonzero grad, declared params with no grad at all)."""
    names = set(declared)
    leaked, silent = set(), set()
    for k, p in model.named_parameters():
        nonzero = p.grad is not None and bool(np.any(p.grad))
        if nonzero and k not in names:
            leaked.add(k)
        if k in names and not nonzero:
            silent.add(k)
    return leaked, silent


# ---------------------------------------------------------------------------
# runs
# ---------------------------------------------------------------------------

class CsvLog:
    def __init__(self, path: Path | None, columns: list[str]):
        self.rows: list[dict] = []
        self.columns = columns
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "a", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=columns, extrasaction="ignore")
            if self._fh.tell() == 0:
                self._writer.writeheader()

    def add(self, row: dict) -> None:
        self.rows.append(row)
        if self._fh is not None:
            self._writer.writerow(row)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


@dataclass
class RunContext:
    cfg: TrainConfig
    vocab: Vocab
    train: list
    heldout: list
    teacher: VisionTeacher

    @classmethod
    def create(cls, cfg: TrainConfig) -> RunContext:
        vocab = make_vocab(cfg)
        train, held = build_splits(cfg.data, vocab, cfg.model.image_size)
        return cls(cfg, vocab, train, held, build_teacher(cfg))

    def sampler(self, salt: int) -> BatchSampler:
        return BatchSampler(self.train, self.cfg.data, self.vocab, self.cfg.model.n_patches,
                            self.cfg.model.image_size, seed=[self.cfg.seed, salt])

    def collate(self, examples: list[Example]) -> Batch:
        b = collate(examples, self.cfg.model.n_patches)
        b.images = b.images.astype(self.cfg.model.dtype)
        return b


def run_stage1(ctx: RunContext, model: HaploModel | None = None, out_dir: str | Path | None = None,
               steps: int | None = None, on_step: Callable | None = None) -> tuple[HaploModel, list[dict]]:
    cfg = ctx.cfg
    model = model if model is not None else new_model(cfg, ctx.teacher)
    stage = prepare_stage1(model, cfg)
    sampler = ctx.sampler(1)
    out = Path(out_dir) if out_dir else None
    logger = CsvLog(out / "stage1_metrics.csv" if out else None, STAGE1_COLUMNS)
    n = cfg.stage1.steps if steps is None else steps
    try:
        for _ in range(n):
            batch = ctx.collate(sampler(cfg.stage1.batch_size))
            row = stage1_step(stage, ctx.teacher, batch, cfg)
            if on_step is not None:
                on_step(stage, row)
            if row["step"] % max(cfg.log_every, 1) == 0:
                logger.add(row)
            if out and cfg.ckpt_every and stage.step % cfg.ckpt_every == 0:
                save_model(out / f"stage1_step{stage.step}.ckpt", model, "stage1", stage.step)
    finally:
        logger.close()
    if out:
        save_model(out / "stage1.ckpt", model, "stage1", stage.step)
        save_model(out / "stage1_for_stage2.ckpt", model, "stage2", stage.step)
        save_tensors(out / "teacher.ckpt", {k: p.data for k, p in ctx.teacher.named_parameters()},
                     {"config": vars(cfg.model), "stage": "teacher", "step": 0,
                      "teacher_seed": cfg.teacher_seed})
    return model, logger.rows


def run_stage2(ctx: RunContext, model: HaploModel, out_dir: str | Path | None = None,
               steps: int | None = None, on_step: Callable | None = None,
               csv_name: str = "stage2_metrics.csv") -> tuple[HaploModel, list[dict]]:
    cfg = ctx.cfg
    stage = prepare_stage2(model, cfg)
    sampler = ctx.sampler(2)
    out = Path(out_dir) if out_dir else None
    logger = CsvLog(out / csv_name if out else None, STAGE2_COLUMNS)
    n = cfg.stage2.steps if steps is None else steps
    if steps is not None and steps != cfg.stage2.steps:
        stage.optim_cfg = OptimConfig(**{**vars(cfg.stage2), "steps": steps})
    try:
        for _ in range(n):
            batch = ctx.collate(sampler(cfg.stage2.batch_size))
            row = stage2_step(stage, batch)
            if on_step is not None:
                on_step(stage, row)
            if row["step"] % max(cfg.log_every, 1) == 0:
                logger.add(row)
            if out and cfg.ckpt_every and stage.step % cfg.ckpt_every == 0:
                save_model(out / f"stage2_step{stage.step}.ckpt", model, "stage2", stage.step)
    finally:
        logger.close()
    if out:
        save_model(out / "stage2.ckpt", model, "stage2", stage.step)
    return model, logger.rows


def final_window_mean(rows: list[dict], key: str = "loss", fraction: float = 0.1) -> float:
    n = max(1, int(round(len(rows) * fraction)))
    return float(np.mean([r[key] for r in rows[-n:]]))


def run_convergence_comparison(ctx: RunContext, out_dir: str | Path | None = None,
                               stage1_model: HaploModel | None = None,
                               steps: int | None = None) -> dict:
    """Arm A: stage-1 initialized; arm B: randomly initialized pre-decoder. Same stage-2 data."""
    cfg = ctx.cfg
    if stage1_model is None:
        stage1_model, _ = run_stage1(ctx, out_dir=Path(out_dir) / "arm_a" if out_dir else None)
    out = Path(out_dir) if out_dir else None
    arm_a, rows_a = run_stage2(ctx, stage1_model, out / "arm_a" if out else None, steps)
    arm_b = new_model(cfg, inherit=False)
    arm_b, rows_b = run_stage2(ctx, arm_b, out / "arm_b" if out else None, steps)
    result = {
        "arm_a_final_mean": final_window_mean(rows_a),
        "arm_b_final_mean": final_window_mean(rows_b),
        "arm_a": rows_a, "arm_b": rows_b,
        "models": (arm_a, arm_b),
    }
    if out:
        with open(out / "convergence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "arm_a_loss", "arm_b_loss"])
            for ra, rb in zip(rows_a, rows_b):
                w.writerow([ra["step"], ra["loss"], rb["loss"]])
    return result


def retention_check(model: HaploModel, teacher: VisionTeacher, images: np.ndarray,
                    probe_seed: int = 0, batch_size: int = 32) -> float:
    """Mean patch cosine between the vision head's projection of H_v and teacher features.

    ``images`` are raw [0, 1] pixels. A model without heads (after stage 2, or never
    distilled) is probed with a freshly initialized vision head.
    """
    from .masking import Segment

    cfg = model.cfg
    head = model.heads.vision if model.heads is not None else StageOneHeads(
        cfg.d, cfg.teacher_dim, cfg.l, np.random.default_rng(probe_seed), cfg.dtype).vision
    cos = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            chunk = images[i:i + batch_size]
            exs = [Example([Segment.image(cfg.n_patches)], [img], np.zeros(cfg.n_patches, dtype=bool))
                   for img in chunk]
            batch = collate(exs, cfg.n_patches)
            batch.images = batch.images.astype(cfg.dtype)
            H = model.pre_decode(model.embed(batch), batch.mask, batch.positions)
            H_v, _ = model.split_by_modality(H, batch)
            cos.append(ad.cosine_similarity(head(H_v), ad.Tensor(teacher(batch.images))).data)
    return float(np.concatenate(cos).mean())
