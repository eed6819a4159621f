"""Momentum SGD and the warmup/step learning-rate schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import Tensor


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, velocity: dict[int, np.ndarray] | None = None) -> None:
    """Apply ``v <- momentum * v + g; p <- p - lr * (v + weight_decay * p)`` in place.

    ``velocity`` holds the per-parameter buffers between calls, keyed by
    position in ``params``. Gradients are left untouched.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValueError(f"weight decay must be non-negative, got {weight_decay}")
    if velocity is None:
        velocity = {}
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} with shape {p.shape} has no gradient")
        v = velocity.get(i)
        v = p.grad.copy() if v is None else momentum * v + p.grad
        velocity[i] = v
        p.data -= lr * (v + weight_decay * p.data)


class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float) -> None:
        sgd_step(self.params, lr, self.momentum, self.weight_decay, self.velocity)


def learning_rate(it: int, base_lr: float, warmup_steps: int,
                  decay_steps: Sequence[int], decay_factor: float) -> float:
    """Linear warmup to ``base_lr`` then step decay by ``decay_factor`` at each milestone."""
    lr = base_lr
    if warmup_steps > 0 and it < warmup_steps:
        lr = base_lr * (it + 1) / warmup_steps
    for step in decay_steps:
        if it >= step:
            lr *= decay_factor
    return lr
