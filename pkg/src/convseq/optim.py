"""Learnable parameters and a hand-rolled Adam optimizer.

Weight decay is decoupled: it is applied straight to the weights from the
pre-update values, outside the moment estimates.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class GradientError(RuntimeError):
    """A gradient is missing or non-finite; training cannot continue."""


class Parameter:
    """A learnable tensor plus its Adam moment buffers."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.first_moment = Tensor(np.zeros_like(self.value.data))
        self.second_moment = Tensor(np.zeros_like(self.value.data))
        self.step_count = 0

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def adam_step(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0) -> None:
    """One bias-corrected Adam update over every parameter's accumulated grad."""
    for p in params:
        g = p.value.grad
        if g is None:
            raise GradientError(f"parameter {p.name} has no gradient")
        if np.isnan(g).any():
            raise GradientError(f"NaN gradient in parameter {p.name}")
        p.step_count += 1
        t = p.step_count
        m = p.first_moment.data
        v = p.second_moment.data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay != 0.0:
            update = update + weight_decay * p.value.data
        p.value.data -= lr * update


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()
