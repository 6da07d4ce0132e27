from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def numerical_gradient(
    fn: Callable[[], Tensor],
    target: Tensor,
    eps: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``target``.

    Returns ``(flat_indices, values)``. ``target.data`` is perturbed in place
    and restored afterwards.
    """
    flat = target.data.reshape(-1)
    idx = np.arange(flat.size) if indices is None else np.asarray(list(indices), dtype=np.int64)
    out = np.empty(idx.size, dtype=np.float64)
    for k, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = _scalar(fn())
        flat[i] = orig - eps
        lo = _scalar(fn())
        flat[i] = orig
        out[k] = (hi - lo) / (2.0 * eps)
    return idx, out


def _scalar(t: Tensor) -> float:
    if t.size != 1:
        raise ShapeError(f"gradient check needs a scalar output, got shape {t.shape}")
    return float(t.data.reshape(-1)[0])


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def finite_difference_check(
    fn: Callable[[], Tensor],
    inputs: Tensor | Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare backprop gradients of ``fn()`` against central differences.

    ``fn`` is re-evaluated for every perturbation, so it must rebuild its
    graph from the current values of ``inputs``. Every input must be float64
    and have ``requires_grad=True``. With ``max_entries`` set, a seeded random
    subset of each input's entries is checked. Returns the worst relative
    error over all checked entries.
    """
    if isinstance(inputs, Tensor):
        inputs = [inputs]
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("finite-difference checks run in 64-bit; cast inputs first")
        t.grad = None
    loss = fn()
    if loss.size != 1:
        raise ShapeError(f"gradient check needs a scalar output, got shape {loss.shape}")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        analytic = analytic.reshape(-1)
        if max_entries is not None and t.size > max_entries:
            picks = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            picks = None
        idx, numeric = numerical_gradient(fn, t, eps, picks)
        worst = max(worst, relative_error(analytic[idx], numeric))
    return worst
