"""Command line entry point: ``haplo <command> [--config cfg.json] [--set key=value ...]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_model
from .config import load_config
from .data import dataset_digest, save_dataset
from .generate import (SamplingConfig, DecodeSession, dump_attention, eval_toy_vqa,
                       localization_probes, prompt_example)
from .batch import Example
from .masking import assemble, build_mask, format_mask, parse_segment_spec
from .train import (RunContext, new_model, retention_check, run_convergence_comparison,
                    run_stage1, run_stage2)

log = logging.getLogger("haplo")


def _context(args) -> RunContext:
    return RunContext.create(load_config(args.config, args.set))


def _heldout_images(ctx: RunContext, n: int = 100) -> np.ndarray:
    return np.stack([s.image for s in ctx.heldout[:n]])


def cmd_synth_data(args) -> int:
    ctx = _context(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "train.npz", ctx.train, ctx.vocab)
    save_dataset(out / "heldout.npz", ctx.heldout, ctx.vocab)
    print(json.dumps({"train": len(ctx.train), "heldout": len(ctx.heldout),
                      "train_sha256": dataset_digest(ctx.train),
                      "heldout_sha256": dataset_digest(ctx.heldout)}, indent=2))
    return 0


def cmd_pretrain(args) -> int:
    ctx = _context(args)
    model, rows = run_stage1(ctx, out_dir=args.out, steps=args.steps)
    ret = retention_check(model, ctx.teacher, _heldout_images(ctx))
    summary = {"steps": len(rows) and rows[-1]["step"] + 1, "retention_cosine": ret}
    if rows:
        summary.update({k: rows[-1][k] for k in ("L_v", "L_feat", "L_ctp", "L_total", "tau")})
    print(json.dumps(summary, indent=2))
    return 0


def cmd_finetune(args) -> int:
    ctx = _context(args)
    if args.init:
        model, manifest = load_model(args.init)
        log.info("initialized from %s (stage %s, step %s)", args.init, manifest["stage"], manifest["step"])
    else:
        model = new_model(ctx.cfg, inherit=False)
    model, rows = run_stage2(ctx, model, out_dir=args.out, steps=args.steps)
    report = eval_toy_vqa(model, ctx.heldout, ctx.vocab)
    print(json.dumps({"final_loss": rows[-1]["loss"] if rows else None,
                      "heldout_accuracy": report.accuracy}, indent=2))
    return 0


def cmd_eval(args) -> int:
    ctx = _context(args)
    model, _ = load_model(args.ckpt)
    samples = ctx.heldout[:args.n] if args.n else ctx.heldout
    report = eval_toy_vqa(model, samples, ctx.vocab, args.max_new_tokens)
    text = report.to_json(args.report)
    if args.localization:
        print(json.dumps(localization_probes(model, samples, ctx.vocab), indent=2))
    print(text)
    return 0


def _prompt(args, ctx: RunContext, n_patches: int) -> Example:
    if args.image is not None:
        image = np.load(args.image).astype(np.float64)
    else:
        image = ctx.heldout[args.index].image
    return Example.from_parts([image, (ctx.vocab.encode(args.question), False)], n_patches)


def cmd_generate(args) -> int:
    ctx = _context(args)
    model, _ = load_model(args.ckpt)
    sampling = SamplingConfig(greedy=args.temperature <= 0, temperature=args.temperature,
                              top_k=args.top_k, max_new_tokens=args.max_new_tokens, seed=args.seed)
    tokens, logps = DecodeSession(model, sampling, ctx.vocab.eos).generate(
        _prompt(args, ctx, model.cfg.n_patches))
    print(json.dumps({"answer": ctx.vocab.decode(tokens), "tokens": tokens,
                      "log_prob": float(np.sum(logps))}, indent=2))
    return 0


def cmd_dump_attn(args) -> int:
    ctx = _context(args)
    model, _ = load_model(args.ckpt)
    if args.question is None:
        sample = ctx.heldout[args.index]
        prompt = prompt_example(sample, model.cfg.n_patches)
    else:
        prompt = _prompt(args, ctx, model.cfg.n_patches)
    maps = dump_attention(model, prompt, ctx.vocab, args.words, args.layer, args.out, args.per_head)
    for word, m in maps.items():
        grid = (m.mean(axis=0) if args.per_head else m).reshape(model.cfg.grid, model.cfg.grid)
        print(word)
        print(np.array2string(grid, precision=3, suppress_small=True))
    return 0


def cmd_dump_mask(args) -> int:
    seq = assemble(parse_segment_spec(args.segments))
    print(format_mask(build_mask(seq)))
    return 0


def cmd_compare(args) -> int:
    ctx = _context(args)
    stage1 = load_model(args.stage1)[0] if args.stage1 else None
    res = run_convergence_comparison(ctx, args.out, stage1, args.steps)
    print(json.dumps({"arm_a_final_mean": res["arm_a_final_mean"],
                      "arm_b_final_mean": res["arm_b_final_mean"],
                      "arm_a_lower": res["arm_a_final_mean"] < res["arm_b_final_mean"]}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="haplo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. stage1.steps=500")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("synth-data", cmd_synth_data, "write the train/held-out toy datasets")
    sp.add_argument("--out", required=True)

    sp = add("pretrain", cmd_pretrain, "stage 1: distill into the pre-decoder")
    sp.add_argument("--out", required=True)
    sp.add_argument("--steps", type=int)

    sp = add("finetune", cmd_finetune, "stage 2: full fine-tuning on next-token prediction")
    sp.add_argument("--out", required=True)
    sp.add_argument("--init", help="checkpoint to start from (random init if omitted)")
    sp.add_argument("--steps", type=int)

    sp = add("eval", cmd_eval, "exact-match accuracy on the held-out questions")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--report", help="write the JSON report here")
    sp.add_argument("--n", type=int, default=0, help="evaluate only the first n samples")
    sp.add_argument("--max-new-tokens", type=int, default=8)
    sp.add_argument("--localization", action="store_true", help="also run attention probes")

    for name, fn, help in (("generate", cmd_generate, "answer one question about an image"),
                           ("dump-attn", cmd_dump_attn, "word-to-patch attention heatmaps")):
        sp = add(name, fn, help)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--index", type=int, default=0, help="held-out sample supplying the image")
        sp.add_argument("--image", help=".npy image (H, W, C) in [0, 1] instead of a held-out one")
        sp.add_argument("--question", required=name == "generate")
        if name == "generate":
            sp.add_argument("--temperature", type=float, default=0.0)
            sp.add_argument("--top-k", type=int, default=0)
            sp.add_argument("--max-new-tokens", type=int, default=8)
            sp.add_argument("--seed", type=int, default=0)
        else:
            sp.add_argument("--words", nargs="+", required=True)
            sp.add_argument("--layer", type=int, default=None,
                            help="pre-decoder layer (default: mean over layers)")
            sp.add_argument("--per-head", action="store_true")
            sp.add_argument("--out", required=True)

    sp = sub.add_parser("dump-mask", help="print the attention mask of a segment layout")
    sp.add_argument("segments", help='e.g. "t3,i4,t2" (text of 3 tokens, image of 4 patches, ...)')
    sp.add_argument("--config")
    sp.add_argument("--set", action="append", default=[])
    sp.set_defaults(fn=cmd_dump_mask)

    sp = add("compare-convergence", cmd_compare, "stage-2 loss curves: stage-1 init vs random init")
    sp.add_argument("--out", required=True)
    sp.add_argument("--stage1", help="stage-1 checkpoint for arm A (trained here if omitted)")
    sp.add_argument("--steps", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ValueError, KeyError, IndexError, FileNotFoundError) as e:
        print(f"haplo {args.command}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
