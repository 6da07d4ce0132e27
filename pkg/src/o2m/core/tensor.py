"""
Reverse-mode automatic differentiation on top of NumPy arrays.

A :class:`Tensor` wraps an ``ndarray`` and, when produced by a differentiable
op while gradient recording is enabled, remembers the :class:`Function` that
created it. :meth:`Tensor.backward` walks that graph in reverse topological
order and accumulates ``d loss / d leaf`` into the ``grad`` slot of every leaf
with ``requires_grad=True``.

The graph is rebuilt on every forward pass and kept alive by the output
tensor, so calling ``backward`` twice on the same loss accumulates twice.

Precision follows the inputs: float32 arrays stay float32, float64 arrays
stay float64. Python scalars and integer arrays become float32.
"""

from __future__ import annotations

import contextlib
from typing import Iterator, Sequence

import numpy as np

from ..errors import MissingDerivativeError, NonFiniteError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(np.float32)


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._ctx: Function | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate gradients of this tensor into every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
            if not np.isfinite(self.data).all():
                raise NonFiniteError(f"loss is not finite: {self.data.reshape(-1)[0]}")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != {self.shape}")
        if not self.requires_grad:
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            fn = node._ctx
            if fn is None:
                if node.grad is None:
                    node.grad = g.copy() if g is grad else g
                else:
                    node.grad = node.grad + g
                continue
            if not fn.differentiable:
                raise MissingDerivativeError(
                    f"op {type(fn).__name__} has no registered derivative"
                )
            parent_grads = fn.backward(g)
            if not isinstance(parent_grads, tuple):
                parent_grads = (parent_grads,)
            for parent, pg in zip(fn.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(
                        f"{type(fn).__name__} produced grad {pg.shape} for input {parent.shape}"
                    )
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators --------------------------------------------------------
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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


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
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


class Function:
    """One differentiable op.

    Subclasses implement ``forward(*arrays, **kwargs)`` and
    ``backward(grad)``; the latter returns one gradient (or None) per input.
    Set ``differentiable = False`` for ops with no derivative.
    """

    differentiable = True

    def __init__(self):
        self.parents: tuple[Tensor, ...] = ()
        self.needs_grad: tuple[bool, ...] = ()

    def forward(self, *arrays, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray):
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **kwargs) -> Tensor:
        ref = next((t for t in inputs if isinstance(t, Tensor)), None)
        tensors = tuple(as_tensor(t, ref) for t in inputs)
        fn = cls()
        fn.needs_grad = tuple(t.requires_grad for t in tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = _GRAD_ENABLED and any(fn.needs_grad)
        result = Tensor(out, requires_grad=track)
        if track:
            fn.parents = tensors
            result._ctx = fn
        return result


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------
class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(g, self.shapes[1])


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return unbroadcast(g, self.shapes[0]), unbroadcast(-g, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = unbroadcast(g * self.b, self.a.shape) if self.needs_grad[0] else None
        gb = unbroadcast(g * self.a, self.b.shape) if self.needs_grad[1] else None
        return ga, gb


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = unbroadcast(g / self.b, self.a.shape) if self.needs_grad[0] else None
        gb = (
            unbroadcast(-g * self.a / (self.b * self.b), self.b.shape)
            if self.needs_grad[1]
            else None
        )
        return ga, gb


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, g):
        return (-g,)


class Power(Function):
    def forward(self, a, exponent):
        self.a, self.p = a, exponent
        return a**exponent

    def backward(self, g):
        return (g * self.p * self.a ** (self.p - 1),)


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, g):
        return (g / self.a,)


class Sigmoid(Function):
    def forward(self, a):
        # split by sign so exp never overflows
        out = np.empty_like(a)
        pos = a >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
        e = np.exp(a[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class LeakyReLU(Function):
    # branch-free on purpose: np.where over random signs is ~5x slower
    def forward(self, a, slope=0.0):
        self.mask = a >= 0
        self.slope = a.dtype.type(slope)
        if 0.0 <= slope < 1.0:
            out = a * self.slope
            return np.maximum(a, out, out=out)
        return np.where(self.mask, a, a * self.slope)

    def backward(self, g):
        mult = self.mask.astype(g.dtype)
        if self.slope:
            mult *= 1 - self.slope
            mult += self.slope
        mult *= g
        return (mult,)


class Clip(Function):
    def forward(self, a, lo=None, hi=None):
        out = np.clip(a, lo, hi)
        self.mask = out == a
        return out

    def backward(self, g):
        return (g * self.mask,)


class Round(Function):
    """Half-away-from-zero rounding; has no derivative."""

    differentiable = False

    def forward(self, a):
        return np.sign(a) * np.floor(np.abs(a) + 0.5)


# -- reductions and shape ops ----------------------------------------------
class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.shape, self.axis, self.keepdims = a.shape, axis, keepdims
        return np.asarray(a.sum(axis=axis, keepdims=keepdims))

    def backward(self, g):
        if self.axis is not None and not self.keepdims:
            g = np.expand_dims(g, self.axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape=None):
        self.shape = a.shape
        return a.reshape(shape)

    def backward(self, g):
        return (g.reshape(self.shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, g):
        if self.axes is None:
            return (np.transpose(g),)
        return (np.transpose(g, np.argsort(self.axes)),)


class GetItem(Function):
    def forward(self, a, index=None):
        self.shape, self.dtype, self.index = a.shape, a.dtype, index
        return a[index]

    def backward(self, g):
        out = np.zeros(self.shape, self.dtype)
        if _is_basic_index(self.index):
            out[self.index] += g
        else:
            np.add.at(out, self.index, g)
        return (out,)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        cuts = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(g, cuts, axis=self.axis))


class Pad(Function):
    """Zero (``constant``) or replicate (``edge``) padding."""

    def forward(self, a, widths=None, mode="constant"):
        self.widths, self.mode = widths, mode
        return np.pad(a, widths, mode=mode)

    def backward(self, g):
        for axis, (before, after) in enumerate(self.widths):
            if before == 0 and after == 0:
                continue
            n = g.shape[axis] - before - after
            core = np.take(g, np.arange(before, before + n), axis=axis)
            if self.mode == "edge":
                lead = [slice(None)] * g.ndim
                if before:
                    lead[axis] = slice(0, 1)
                    core[tuple(lead)] += np.take(g, np.arange(before), axis=axis).sum(
                        axis=axis, keepdims=True
                    )
                if after:
                    lead[axis] = slice(n - 1, n)
                    core[tuple(lead)] += np.take(
                        g, np.arange(before + n, g.shape[axis]), axis=axis
                    ).sum(axis=axis, keepdims=True)
            g = core
        return (g,)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError("matmul supports 2-D operands only")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ self.b.T if self.needs_grad[0] else None
        gb = self.a.T @ g if self.needs_grad[1] else None
        return ga, gb


# -- functional wrappers ---------------------------------------------------
def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def neg(a) -> Tensor:
    return Neg.apply(a)


def power(a, exponent: float) -> Tensor:
    return Power.apply(a, exponent=exponent)


def exp(a) -> Tensor:
    return Exp.apply(a)


def log(a) -> Tensor:
    return Log.apply(a)


def sigmoid(a) -> Tensor:
    return Sigmoid.apply(a)


def leaky_relu(a, slope: float = 0.0) -> Tensor:
    """``x`` where ``x >= 0`` else ``slope * x``; slope 0 is plain ReLU."""
    return LeakyReLU.apply(a, slope=slope)


def relu(a) -> Tensor:
    return LeakyReLU.apply(a, slope=0.0)


def clip(a, lo=None, hi=None) -> Tensor:
    return Clip.apply(a, lo=lo, hi=hi)


def round_half_away(a) -> Tensor:
    return Round.apply(a)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def flatten(a) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a, axes=None) -> Tensor:
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def getitem(a, index) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def pad(a, widths, mode: str = "constant") -> Tensor:
    if mode not in ("constant", "edge"):
        raise ValueError(f"unsupported pad mode {mode!r}")
    return Pad.apply(a, widths=tuple(tuple(w) for w in widths), mode=mode)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def square(a) -> Tensor:
    a = as_tensor(a)
    return mul(a, a)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    shift = Tensor(logits.data.max(axis=axis, keepdims=True))
    z = logits - shift
    return z - log(tsum(exp(z), axis=axis, keepdims=True))
