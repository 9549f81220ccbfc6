"""Trainable parameters and the Adam update rule.

Adam state (both moment estimates and the step counter) lives on the
Parameter itself, so an optimizer is just `adam_step(params, lr, ...)` over
whatever parameter set the current phase owns.  Gradients are expected to
have been populated by a backward pass (zero-filled counts as populated);
a parameter whose gradient was never written is a wiring bug and raises.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor

__all__ = ["Parameter", "MissingGradientError", "zero_grads", "set_trainable", "adam_step"]


class MissingGradientError(RuntimeError):
    """adam_step found a parameter whose gradient was never populated."""


class Parameter:
    """A leaf tensor plus its Adam moment estimates and step counter."""

    __slots__ = ("name", "value", "first_moment", "second_moment", "step_count")

    def __init__(self, value: Tensor, name: str = ""):
        value.grad_enabled = True
        self.name = name
        self.value = value
        self.first_moment = np.zeros_like(value.data)
        self.second_moment = np.zeros_like(value.data)
        self.step_count = 0

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape}, steps={self.step_count})"


def zero_grads(params: Iterable[Parameter]) -> None:
    """Populate every gradient with zeros, ready for accumulation."""
    for p in params:
        p.value.grad = np.zeros_like(p.value.data)


def set_trainable(params: Iterable[Parameter], flag: bool) -> None:
    """Toggle gradient flow into these parameters (frozen nets stay constant)."""
    for p in params:
        p.value.grad_enabled = bool(flag)


def adam_step(
    params: Iterable[Parameter],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update; clears gradients afterwards.

    m <- b1*m + (1-b1)*g        mhat = m / (1 - b1^t)
    v <- b2*v + (1-b2)*g^2      vhat = v / (1 - b2^t)
    theta <- theta - lr * mhat / (sqrt(vhat) + eps)
    """
    for p in params:
        g = p.value.grad
        if g is None:
            raise MissingGradientError(f"parameter {p.name!r} has no gradient; run backward first")
        p.step_count += 1
        t = p.step_count
        p.first_moment *= beta1
        p.first_moment += (1.0 - beta1) * g
        p.second_moment *= beta2
        p.second_moment += (1.0 - beta2) * (g * g)
        mhat = p.first_moment / (1.0 - beta1**t)
        vhat = p.second_moment / (1.0 - beta2**t)
        p.value.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.data.dtype, copy=False)
        p.value.grad = None
