import json

import pytest

from haplo.cli import main

from conftest import tiny_train_config


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "cfg.json").write_text(json.dumps(tiny_train_config().to_dict()))
    return d


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_dump_mask(capsys):
    code, out, _ = run(capsys, "dump-mask", "t1,i2,t1,i2")
    assert code == 0
    assert out.splitlines() == ["1 0 0 0 0 0", "1 1 1 0 0 0", "1 1 1 0 0 0",
                                "1 1 1 1 0 0", "1 1 1 1 1 1", "1 1 1 1 1 1"]


def test_pipeline_commands(capsys, workdir):
    cfg = workdir / "cfg.json"
    code, out, _ = run(capsys, "synth-data", "--config", cfg, "--out", workdir / "data")
    assert code == 0 and json.loads(out)["train"] == 60
    assert (workdir / "data" / "train.npz").exists()

    code, out, _ = run(capsys, "pretrain", "--config", cfg, "--out", workdir / "s1", "--steps", 3)
    assert code == 0 and "retention_cosine" in json.loads(out)

    code, out, _ = run(capsys, "finetune", "--config", cfg, "--out", workdir / "s2",
                       "--init", workdir / "s1" / "stage1.ckpt", "--set", "stage2.steps=3")
    assert code == 0 and 0 <= json.loads(out)["heldout_accuracy"] <= 1

    ckpt = workdir / "s2" / "stage2.ckpt"
    code, out, _ = run(capsys, "eval", "--config", cfg, "--ckpt", ckpt, "--report", workdir / "r.json",
                       "--n", 5)
    assert code == 0 and json.loads((workdir / "r.json").read_text())["n"] == 5

    code, out, _ = run(capsys, "generate", "--config", cfg, "--ckpt", ckpt,
                       "--question", "what color is row 0 col 1 ?", "--max-new-tokens", 3)
    assert code == 0 and len(json.loads(out)["tokens"]) <= 3

    code, out, _ = run(capsys, "dump-attn", "--config", cfg, "--ckpt", ckpt, "--words", "is",
                       "--layer", 0, "--out", workdir / "attn")
    assert code == 0 and (workdir / "attn" / "attention_layer0.pgm").exists()

    code, _, err = run(capsys, "dump-attn", "--config", cfg, "--ckpt", ckpt, "--words", "zebra",
                       "--out", workdir / "attn")
    assert code == 2 and "prompt tokens" in err


def test_compare_convergence(capsys, workdir):
    code, out, _ = run(capsys, "compare-convergence", "--config", workdir / "cfg.json",
                       "--out", workdir / "cmp", "--steps", 4, "--set", "stage1.steps=3")
    doc = json.loads(out)
    assert code == 0 and {"arm_a_final_mean", "arm_b_final_mean"} <= set(doc)
    lines = (workdir / "cmp" / "convergence.csv").read_text().splitlines()
    assert lines[0] == "step,arm_a_loss,arm_b_loss" and len(lines) == 5


def test_bad_override(capsys):
    code, _, err = run(capsys, "pretrain", "--out", "unused", "--set", "stage1.nope=1")
    assert code == 2 and "nope" in err
