"""SGD with momentum and He initialization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from roomnet.engine.tensor import Tensor
from roomnet.errors import InvalidArgumentError


def he_init(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """Zero-mean normal samples with variance 2 / fan_in."""
    if fan_in <= 0:
        raise InvalidArgumentError(f"he_init: fan_in must be positive, got {fan_in}")
    std = np.sqrt(2.0 / fan_in)
    return Tensor(rng.standard_normal(shape) * std, dtype=dtype, requires_grad=True)


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0005
    buffers: list = field(default_factory=list)


class SGD:
    """Momentum SGD with weight decay folded into the gradient.

    Per parameter ``p`` with gradient ``g``::

        v <- momentum * v + g + weight_decay * p
        p <- p - lr * v
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params = list(params)
        self.state = OptimizerState(lr, momentum, weight_decay,
                                    [np.zeros_like(p.data) for p in self.params])

    @property
    def lr(self) -> float:
        return self.state.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self.state.lr = float(value)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        sgd_step(self.params, [p.grad for p in self.params], self.state)


def sgd_step(params: Sequence[Tensor], grads: Sequence, state: OptimizerState) -> None:
    if len(state.buffers) != len(params):
        raise InvalidArgumentError("sgd_step: one momentum buffer per parameter is required")
    lr, mu, wd = state.lr, state.momentum, state.weight_decay
    for p, g, v in zip(params, grads, state.buffers):
        if v.shape != p.shape:
            raise InvalidArgumentError(f"sgd_step: buffer shape {v.shape} != parameter shape {p.shape}")
        v *= mu
        if g is not None:
            v += g
        if wd:
            v += wd * p.data
        p.data -= (lr * v).astype(p.dtype)
