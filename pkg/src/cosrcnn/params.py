"""Helpers for dataclass-based parameter groups."""

from __future__ import annotations

import copy
import dataclasses

import numpy as np

from .tensor import Tensor


class ParamGroup:
    """Mixin for dataclasses whose ``Tensor`` fields are trainable parameters."""

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)
                if isinstance(getattr(self, f.name), Tensor)}

    def tensors(self) -> list[Tensor]:
        return list(self.named().values())

    def clone(self, requires_grad: bool | None = None):
        new = copy.copy(self)
        for name, t in self.named().items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            setattr(new, name, Tensor(t.data.copy(), requires_grad=rg))
        return new


def he_normal(rng: np.random.Generator, shape, fan_in: int, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape), requires_grad=requires_grad)


def normal(rng: np.random.Generator, shape, std: float, requires_grad: bool = True) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = True) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)
