from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


def he_uniform_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """He uniform initializer: i.i.d. U(-b, b) with ``b = sqrt(6 / fan_in)``."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = math.sqrt(6.0 / fan_in)
    values = rng.uniform(-bound, bound, size=tuple(shape))
    return Tensor(values.astype(dtype), requires_grad=True)


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0


@dataclass
class Adam:
    """Adam with bias correction.

    Defaults are lr=1e-4 and beta1=0.5 for GAN training; beta2 and epsilon
    take the usual 0.999 and 1e-8.
    """

    params: Sequence[Tensor]
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    epsilon: float = 1e-8
    states: list[AdamState] = field(init=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        for b in (self.beta1, self.beta2):
            if not 0.0 < b < 1.0:
                raise ValueError("betas must lie in (0, 1)")
        self.params = list(self.params)
        self.states = [
            AdamState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            adam_step(p, st, self.lr, self.beta1, self.beta2, self.epsilon)


def adam_step(
    param: Tensor,
    state: AdamState,
    lr: float = 1e-4,
    beta1: float = 0.5,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> None:
    """Apply one in-place Adam update to ``param`` using its ``grad``.

    A parameter without a gradient is treated as having a zero gradient, so
    its step counter still advances.
    """
    if state.first_moment.shape != param.shape or state.second_moment.shape != param.shape:
        raise ShapeError(
            f"Adam moments {state.first_moment.shape} do not match parameter {param.shape}"
        )
    grad = param.grad
    if grad is None:
        grad = np.zeros_like(param.data)
    elif grad.shape != param.shape:
        raise ShapeError(f"gradient {grad.shape} does not match parameter {param.shape}")
    state.step_count += 1
    t = state.step_count
    m, v = state.first_moment, state.second_moment
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    update = lr * m_hat / (np.sqrt(v_hat) + epsilon)
    param.data -= update.astype(param.dtype, copy=False)
