"""Minimal parameter container, in the spirit of ``torch.nn.Module``."""

from __future__ import annotations

from collections import OrderedDict
from typing import Iterator, Mapping

import numpy as np

from ..errors import ChannelMismatchError, CheckpointError, ShapeError
from .tensor import Tensor


class Module:
    """Attribute-walking container for parameters, buffers and submodules.

    Parameters are :class:`Tensor` attributes; buffers are ndarray
    attributes whose names are listed in ``_buffer_names``. Lists of modules
    are traversed with their index as the name component.
    """

    _buffer_names: tuple[str, ...] = ()

    def __init__(self):
        self.training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffer_names:
            yield prefix + name, getattr(self, name)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for m in self.modules():
            for name in m._buffer_names:
                setattr(m, name, getattr(m, name).astype(dtype))
        return self

    def state_dict(self, prefix: str = "") -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters(prefix):
            out[name] = p.data.copy()
        for name, b in self.named_buffers(prefix):
            out[name] = np.array(b, copy=True)
        return out

    def load_state_dict(
        self, state: Mapping[str, np.ndarray], prefix: str = "", strict: bool = True
    ) -> None:
        """Copy arrays from ``state`` into this module.

        Keys outside ``prefix`` are ignored. With ``strict``, unknown or
        missing keys under ``prefix`` raise :class:`CheckpointError`.
        """
        own = dict(self.named_parameters(prefix))
        bufs = {name for name, _ in self.named_buffers(prefix)}
        relevant = {k: v for k, v in state.items() if k.startswith(prefix)}
        if strict:
            unknown = sorted(set(relevant) - set(own) - bufs)
            if unknown:
                raise CheckpointError(f"unknown tensor name(s): {', '.join(unknown[:5])}")
            missing = sorted((set(own) | bufs) - set(relevant))
            if missing:
                raise CheckpointError(f"missing tensor name(s): {', '.join(missing[:5])}")
        for name, p in own.items():
            if name not in relevant:
                continue
            arr = np.asarray(relevant[name])
            if arr.shape != p.shape:
                cls = ChannelMismatchError if arr.ndim == p.ndim else ShapeError
                raise cls(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
            p.grad = None
        for m_prefix, module in self._named_modules(prefix):
            for bname in module._buffer_names:
                key = m_prefix + bname
                if key in relevant:
                    cur = getattr(module, bname)
                    arr = np.asarray(relevant[key])
                    if arr.shape != cur.shape:
                        raise ChannelMismatchError(
                            f"{key}: checkpoint shape {arr.shape} != model shape {cur.shape}"
                        )
                    setattr(module, bname, arr.astype(cur.dtype, copy=True))

    def _named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for name, child in self.children():
            yield from child._named_modules(f"{prefix}{name}.")
