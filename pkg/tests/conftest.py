import numpy as np
import pytest

from haplo.batch import Example, collate
from haplo.config import ModelConfig, TrainConfig, DataConfig, OptimConfig
from haplo.model import HaploModel


def tiny_model_config(**kw) -> ModelConfig:
    base = dict(image_size=8, channels=3, patch=4, d=16, d_post=12, l=12, vocab=40,
                pre_depth=1, post_depth=1, heads=2, post_heads=2, mlp_ratio=2, post_hidden=20,
                teacher_dim=16, teacher_depth=1, max_len=40, precision="float64")
    base.update(kw)
    return ModelConfig(**base)


def tiny_train_config(**kw) -> TrainConfig:
    """A config small enough for training runs inside unit tests."""
    model = tiny_model_config(image_size=12, patch=6, vocab=32, max_len=48)
    data = DataConfig(n_train=60, n_heldout=20)
    cfg = TrainConfig(model=model, data=data,
                      stage1=OptimConfig(lr=1e-3, warmup=2, steps=6, batch_size=4),
                      stage2=OptimConfig(lr=1e-3, beta2=0.98, weight_decay=0.0, warmup=2, steps=6,
                                         batch_size=4))
    return cfg.with_overrides([f"{k}={v}" for k, v in kw.items()])


def random_example(rng, cfg: ModelConfig, layout=("t", "i", "t"), answer_tail: int = 2) -> Example:
    parts = []
    for kind in layout:
        if kind == "i":
            parts.append(rng.random((cfg.image_size, cfg.image_size, cfg.channels)))
        else:
            parts.append((list(rng.integers(0, cfg.vocab, size=int(rng.integers(1, 4)))), False))
    parts.append((list(rng.integers(0, cfg.vocab, size=answer_tail)), True))
    return Example.from_parts(parts, cfg.n_patches)


@pytest.fixture
def cfg():
    return tiny_model_config()


@pytest.fixture
def model(cfg):
    return HaploModel(cfg, seed=3)


@pytest.fixture
def batch(cfg):
    rng = np.random.default_rng(11)
    exs = [random_example(rng, cfg, ("t", "i", "t")), random_example(rng, cfg, ("i", "t", "i", "t")),
           random_example(rng, cfg, ("t",))]
    return collate(exs, cfg.n_patches)


def param_gradcheck(loss_fn, params: dict, n_coords: int = 6, h: float = 1e-5, seed: int = 0) -> float:
    """Central-difference spot check of d loss / d param on a few random coordinates per tensor."""
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.grad = None
    loss_fn().backward()
    analytic, numeric = [], []
    for name, p in params.items():
        flat = p.data.reshape(-1)
        grad = np.zeros(flat.size) if p.grad is None else p.grad.reshape(-1)
        for idx in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
            old = flat[idx]
            flat[idx] = old + h
            up = float(loss_fn().data)
            flat[idx] = old - h
            down = float(loss_fn().data)
            flat[idx] = old
            analytic.append(grad[idx])
            numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.abs(a - n).max() / max(np.abs(a).max(), np.abs(n).max(), 1e-8))


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
