"""Parameter containers built on the autodiff Tensor."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, linear


def param(data, dtype) -> Tensor:
    return Tensor(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Walks attributes to find parameters. Lists of modules are supported.

    Every public Tensor attribute is a parameter, frozen or not; constants live in
    numpy arrays or underscore-prefixed attributes.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def trainable(self) -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters() if p.requires_grad}

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def astype(self, dtype) -> Module:
        """Cast every parameter in place (used to run float64 checks on a float32 model)."""
        for p in self.parameters().values():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, dtype=np.float64,
                 bias: bool = True, std: float | None = None):
        std = 1.0 / np.sqrt(d_in) if std is None else std
        self.weight = param(rng.normal(0.0, std, size=(d_in, d_out)), dtype)
        self.bias = param(np.zeros(d_out), dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def set_identity(self) -> None:
        d_in, d_out = self.weight.shape
        if d_in != d_out:
            raise ValueError(f"identity init needs a square layer, got {d_in}x{d_out}")
        self.weight.data = np.eye(d_in, dtype=self.weight.dtype)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)
