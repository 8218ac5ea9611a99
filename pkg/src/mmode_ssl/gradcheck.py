"""Central finite-difference gradients, used to validate the analytic backward pass."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def numerical_gradient(
    f: Callable[..., float],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
    indices: Sequence[Sequence[tuple]] | None = None,
) -> list[np.ndarray]:
    """Central differences of scalar ``f(*arrays)`` w.r.t. each array.

    ``f`` receives plain float64 arrays and must return a float. When
    ``indices`` is given, only those entries are probed and the rest of the
    returned gradient is NaN.
    """
    arrays = [np.array(a, dtype=np.float64, copy=True) for a in arrays]
    grads = []
    for k, arr in enumerate(arrays):
        grad = np.full(arr.shape, np.nan) if indices is not None else np.zeros(arr.shape)
        probe = np.ndindex(arr.shape) if indices is None else indices[k]
        for idx in probe:
            orig = arr[idx]
            arr[idx] = orig + h
            up = f(*arrays)
            arr[idx] = orig - h
            down = f(*arrays)
            arr[idx] = orig
            grad[idx] = (up - down) / (2.0 * h)
        grads.append(grad)
    return grads


def analytic_gradient(build: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    """Gradients of ``build(*tensors)`` via the reverse pass."""
    leaves = [Tensor(np.array(a, dtype=np.float64, copy=True), requires_grad=True) for a in arrays]
    out = build(*leaves)
    out.backward()
    return [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-12) -> float:
    """max |a - n| / max(max|a|, max|n|), ignoring NaN (unprobed) entries."""
    keep = ~np.isnan(numeric)
    a, n = analytic[keep], numeric[keep]
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), np.abs(n).max(), floor)
    return float(np.abs(a - n).max() / scale)


def check_gradients(
    build: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    h: float = 1e-5,
    indices: Sequence[Sequence[tuple]] | None = None,
    pooled: bool = False,
) -> float:
    """Worst relative error between analytic and finite-difference gradients over all inputs.

    With ``pooled`` the gradients of all inputs are compared as one vector, which
    is the right scale when some inputs legitimately get an all-zero gradient
    (e.g. a bias the loss is invariant to).
    """
    analytic = analytic_gradient(build, arrays)
    numeric = numerical_gradient(lambda *xs: float(build(*[Tensor(x) for x in xs]).data), arrays, h, indices)
    if pooled:
        return relative_error(np.concatenate([a.ravel() for a in analytic]), np.concatenate([n.ravel() for n in numeric]))
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))
