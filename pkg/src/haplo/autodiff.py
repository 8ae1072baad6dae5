"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Only the operations the model and losses need are provided. Elementwise binary
ops broadcast over *leading* dimensions only: the smaller operand's shape must be
a suffix of the larger one's (or a scalar). Anything else needs an explicit reshape.

Every op records its inputs and a closure that maps the output gradient to input
gradients. ``Tensor.backward`` walks that record in reverse topological order.
"""

from __future__ import annotations

import contextlib
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class EmptyLossWarning(UserWarning):
    """A mean loss had no contributing positions and was defined as 0."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, dtype=None, name=None,
                 _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable | None = _backward
        self.op = op
        self.name = name

    # ---- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # ---- autodiff driver --------------------------------------------------
    def tape(self) -> list[Tensor]:
        """Topologically ordered record of every node this tensor depends on."""
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node._parents):
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(self.tape()):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ---- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return swapaxes(self, -2, -1)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)
    return Tensor(data, op=op)


def _check_suffix_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    short, long = (a, b) if len(a) <= len(b) else (b, a)
    if long[len(long) - len(short):] != short:
        raise ShapeError(f"{op}: shapes {a} and {b} only broadcast over leading dims")


def _sum_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_suffix_broadcast(a.shape, b.shape, "add")

    def backward(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_suffix_broadcast(a.shape, b.shape, "sub")

    def backward(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_suffix_broadcast(a.shape, b.shape, "mul")

    def backward(g):
        ga = _sum_to(g * b.data, a.shape) if a.requires_grad else None
        gb = _sum_to(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = (_lift(a, b if isinstance(b, Tensor) else None), _lift(b, a if isinstance(a, Tensor) else None))
    _check_suffix_broadcast(a.shape, b.shape, "div")
    out = a.data / b.data

    def backward(g):
        ga = _sum_to(g / b.data, a.shape) if a.requires_grad else None
        gb = _sum_to(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward, "div")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    cdf = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
    return _result(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),), "gelu")


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    return _result(x.data * sig, (x,), lambda g: (g * sig * (1.0 + x.data * (1.0 - sig)),), "silu")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def take(x: Tensor, index) -> Tensor:
    """Gather rows of ``x`` along axis 0; output shape is ``index.shape + x.shape[1:]``."""
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index.reshape(-1), g.reshape((-1,) + x.shape[1:]))
        return (gx,)

    return _result(x.data[index], (x,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True; the mask is a constant."""
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, np.asarray(value, dtype=x.dtype), x.data)
    return _result(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype),), "masked_fill")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot contract shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        ga = _sum_to(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _sum_to(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# ---------------------------------------------------------------------------
# normalization, softmax and losses
# ---------------------------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), backward, "softmax")


def _log_softmax_array(a: np.ndarray, axis: int = -1) -> np.ndarray:
    z = a - a.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    out = _log_softmax_array(x.data, axis)

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    out = xhat if gain is None else xhat * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def backward(g):
        gx = g if gain is None else g * gain.data
        gx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gain is not None:
            grads.append(_sum_to(g * xhat, gain.shape))
        if bias is not None:
            grads.append(_sum_to(g, bias.shape))
        return tuple(grads)

    return _result(out, parents, backward, "layer_norm")


def rms_norm(x: Tensor, gain: Tensor | None = None, eps: float = 1e-6) -> Tensor:
    if eps < 0:
        raise ValueError(f"rms_norm eps must be non-negative, got {eps}")
    inv = 1.0 / np.sqrt((x.data * x.data).mean(axis=-1, keepdims=True) + eps)
    xn = x.data * inv
    out = xn if gain is None else xn * gain.data
    parents = [x] if gain is None else [x, gain]

    def backward(g):
        gn = g if gain is None else g * gain.data
        gx = inv * (gn - xn * (gn * xn).mean(axis=-1, keepdims=True))
        if gain is None:
            return (gx,)
        return gx, _sum_to(g * xn, gain.shape)

    return _result(out, parents, backward, "rms_norm")


def cross_entropy(logits: Tensor, targets, ignore_index: int = -100) -> Tensor:
    """Mean negative log-likelihood over positions whose target != ignore_index.

    ``logits`` has shape (..., C) and ``targets`` the matching leading shape.
    If every position is ignored the loss is 0 and an EmptyLossWarning is issued.
    """
    targets = np.asarray(targets, dtype=np.int64)
    C = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat_t = targets.reshape(-1)
    valid = flat_t != ignore_index
    bad = valid & ((flat_t < 0) | (flat_t >= C))
    if bad.any():
        raise IndexError(f"cross_entropy: target {int(flat_t[bad][0])} outside [0, {C})")
    n = int(valid.sum())
    if n == 0:
        warnings.warn("cross_entropy: all positions ignored, loss defined as 0", EmptyLossWarning,
                      stacklevel=2)
        return _result(np.zeros((), dtype=logits.dtype), (logits,),
                       lambda g: (np.zeros_like(logits.data),), "cross_entropy")
    flat = logits.data.reshape(-1, C)
    lsm = _log_softmax_array(flat, -1)
    rows = np.nonzero(valid)[0]
    loss = -lsm[rows, flat_t[rows]].sum() / n

    def backward(g):
        gl = np.exp(lsm)
        gl[rows, flat_t[rows]] -= 1.0
        gl[~valid] = 0.0
        return ((gl * (g / n)).reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def l2_norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    n = np.sqrt((x.data * x.data).sum(axis=-1))
    safe = np.where(n > 0, n, 1.0)

    def backward(g):
        return ((g / safe * (n > 0))[..., None] * x.data,)

    return _result(n, (x,), backward, "l2_norm")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine over the last axis. Rows where either norm is 0 give 0 (and no gradient)."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape} differ")
    na = np.sqrt((a.data * a.data).sum(axis=-1))
    nb = np.sqrt((b.data * b.data).sum(axis=-1))
    ok = (na > 0) & (nb > 0)
    na_s, nb_s = np.where(ok, na, 1.0), np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=-1)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def backward(g):
        g = (g * ok)[..., None]
        c = cos[..., None]
        ga = g * (b.data / (na_s * nb_s)[..., None] - c * a.data / (na_s ** 2)[..., None])
        gb = g * (a.data / (na_s * nb_s)[..., None] - c * b.data / (nb_s ** 2)[..., None])
        return ga, gb

    return _result(cos.astype(a.dtype), (a, b), backward, "cosine")


# ---------------------------------------------------------------------------
# rotary position embedding
# ---------------------------------------------------------------------------

def rope_tables(positions, head_dim: int, base: float = 10000.0, dtype=np.float64):
    """cos/sin tables of shape (len(positions), head_dim // 2)."""
    if head_dim % 2:
        raise ValueError(f"rotary head dim must be even, got {head_dim}")
    inv_freq = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved channel pairs of ``x`` (..., L, head_dim) by position angles."""
    if x.shape[-2] != cos.shape[0] or x.shape[-1] != 2 * cos.shape[1]:
        raise ShapeError(f"rope: input {x.shape} vs tables {cos.shape}")
    x1, x2 = x.data[..., 0::2], x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos

    def backward(g):
        g1, g2 = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g1 * cos + g2 * sin
        gx[..., 1::2] = g2 * cos - g1 * sin
        return (gx,)

    return _result(out, (x,), backward, "rope")


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(f: Callable[[list[np.ndarray]], float], arrays: list[np.ndarray],
                   h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of numpy arrays."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + h
            fp = f(arrays)
            arr[idx] = orig - h
            fm = f(arrays)
            arr[idx] = orig
            g[idx] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5) -> list[float]:
    """Compare backward() against central differences; returns one relative error per input.

    ``fn`` maps Tensors to a scalar Tensor. Inputs are copied to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    fn(*tensors).backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def f(arrs):
        with no_grad():
            return float(fn(*[Tensor(a) for a in arrs]).data)

    numeric = numerical_grad(f, arrays, h)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]
