"""Dense float64 tensors with reverse-mode differentiation.

Every op records its parents and a closure that pushes the output gradient
back to them. ``Tensor.backward`` walks the recorded graph once, in reverse
topological order. Ops whose inputs do not require gradients skip recording,
so inference passes build no graph.

Any op that produces a NaN or Inf raises :class:`NumericalError`.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError

__all__ = [
    "Tensor",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "power",
    "sqrt",
    "exp",
    "log",
    "relu",
    "sigmoid",
    "matmul",
    "transpose",
    "reshape",
    "index",
    "tsum",
    "mean",
    "concat",
    "logsumexp",
    "conv2d",
    "max_pool2d",
    "global_avg_pool",
    "bce_with_logits",
    "batch_normalize",
]


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by '{op}'")


class Tensor:
    """An n-d float64 array node in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Callable[[np.ndarray], None] | None = None,
        op: str = "leaf",
    ):
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Populate ``.grad`` on every node that requires it, seeded with 1."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        for node in order:
            if node is not self and node._backward is not None:
                node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
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
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * out / b.data, b.shape))

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: a._accumulate(-g), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1))

    return _make(out, (a,), backward, f"pow{exponent}")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * 0.5 / out)

    return _make(out, (a,), backward, "sqrt")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g / a.data), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: a._accumulate(g * mask), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: a._accumulate(g * out * (1.0 - out)), "sigmoid")


# ---------------------------------------------------------------------------
# linear algebra and shape
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose expects a 2-d tensor")
    return _make(a.data.T, (a,), lambda g: a._accumulate(g.T), "transpose")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: a._accumulate(g.reshape(original)), "reshape")


def index(a, key) -> Tensor:
    """Basic (slice / integer) indexing; fancy indexing is not supported."""
    a = as_tensor(a)
    parts = key if isinstance(key, tuple) else (key,)
    if not all(isinstance(k, (slice, int, type(Ellipsis))) or k is None for k in parts):
        raise TypeError("only basic slicing is differentiable")
    out = a.data[key]

    def backward(g):
        full = np.zeros_like(a.data)
        full[key] = g
        a._accumulate(full)

    return _make(np.array(out), (a,), backward, "index")


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims))

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g):
        a._accumulate(_expand_reduced(g, a.shape, axis, keepdims) / count)

    return _make(out, (a,), backward, "mean")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                t._accumulate(g[tuple(index)])

    return _make(out, tensors, backward, "concat")


def logsumexp(a, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis``; entries with ``mask == False`` are excluded."""
    a = as_tensor(a)
    x = a.data
    include = np.ones_like(x, dtype=bool) if mask is None else np.broadcast_to(mask, x.shape)
    if not include.any(axis=axis).all():
        raise ValueError("logsumexp: a reduced slice has no included entries")
    shifted_src = np.where(include, x, -np.inf)
    m = shifted_src.max(axis=axis, keepdims=True)
    w = np.where(include, np.exp(x - m), 0.0)
    s = w.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = w / s

    def backward(g):
        a._accumulate(np.expand_dims(g, axis) * soft)

    return _make(out, (a,), backward, "logsumexp")


# ---------------------------------------------------------------------------
# convolutional network primitives
# ---------------------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Rows are output positions (n, i, j); columns are (c_in, di, dj)."""
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _correlate(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    n = xp.shape[0]
    c_out, _, kh, kw = w.shape
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    out2d = cols @ w.reshape(c_out, -1).T
    return np.ascontiguousarray(out2d.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))


def conv2d(x, kernel, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (N, C_in, H, W) with ``kernel`` (C_out, C_in, kh, kw).

    A 3-d ``x`` is treated as a single sample and the result is 3-d as well.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1 or pad < 0 or int(stride) != stride or int(pad) != pad:
        raise ValueError(f"invalid stride={stride} / pad={pad}")
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ValueError(f"kernel expects {k_in} input channels, input has {c_in}")
    hp, wp = h + 2 * pad, w + 2 * pad
    if kh > hp or kw > wp:
        raise ValueError(f"kernel {kh}x{kw} does not fit padded input {hp}x{wp}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    w2d = kernel.data.reshape(c_out, -1)
    out2d = cols @ w2d.T
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ValueError(f"bias shape {bias.shape} != ({c_out},)")
        out2d += bias.data
        parents.append(bias)
    out = np.ascontiguousarray(out2d.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def backward(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, c_out)
        if kernel.requires_grad:
            kernel._accumulate((g2d.T @ cols).reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2d.sum(axis=0))
        if not x.requires_grad:
            return
        if stride == 1 and pad <= kh - 1 and pad <= kw - 1:
            # full correlation of the output gradient with the flipped kernel
            ph, pw = kh - 1 - pad, kw - 1 - pad
            gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
            flipped = kernel.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            x._accumulate(_correlate(gp, flipped, 1)[:, :, :h, :w])
            return
        gcols = (g2d @ w2d).reshape(n, ho, wo, c_in, kh, kw)
        gxp = np.zeros((n, c_in, hp, wp))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[
                    :, :, :, :, i, j
                ].transpose(0, 3, 1, 2)
        x._accumulate(gxp[:, :, pad : pad + h, pad : pad + w])

    result = _make(out, parents, backward, "conv2d")
    return reshape(result, result.shape[1:]) if single else result


def max_pool2d(x, size: int = 2) -> Tensor:
    """Non-overlapping ``size``x``size`` max pooling; trailing rows/cols that do not fill a window are dropped."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ValueError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    cropped = x.data[:, :, : ho * size, : wo * size]
    blocks = cropped.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gc = gb.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        full = np.zeros((n, c, h, w))
        full[:, :, : ho * size, : wo * size] = gc
        x._accumulate(full)

    return _make(out, (x,), backward, "max_pool2d")


def global_avg_pool(x) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool expects 4-d input, got {x.shape}")
    return mean(x, axis=(2, 3))


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logits)`` against 0/1 ``targets``."""
    logits = as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64).reshape(logits.shape)
    x = logits.data
    losses = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    count = max(x.size, 1)

    def backward(g):
        logits._accumulate(g * (_sigmoid(x) - y) / count)

    return _make(np.asarray(losses.mean()), (logits,), backward, "bce_with_logits")


def batch_normalize(z, eps: float = 1e-4, ddof: int = 0) -> Tensor:
    """Standardize every column of a 2-d tensor over the batch (row) axis."""
    z = as_tensor(z)
    n = z.shape[0]
    centered = z - mean(z, axis=0, keepdims=True)
    var = tsum(centered * centered, axis=0, keepdims=True) / (n - ddof)
    return centered / sqrt(var + eps)
