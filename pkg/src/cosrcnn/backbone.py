"""Tiny convolutional backbone: 64x64 RGB -> 32 channels at stride 8."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamGroup, he_normal, zeros
from .tensor import Tensor

FEATURE_CHANNELS = 32
STRIDE = 8
WIDTHS = (16, 32, 32)


@dataclass
class BackboneParams(ParamGroup):
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    conv3_w: Tensor
    conv3_b: Tensor
    conv4_w: Tensor
    conv4_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int = FEATURE_CHANNELS) -> BackboneParams:
        c1, c2, c3 = WIDTHS
        return cls(
            conv1_w=he_normal(rng, (c1, 3, 3, 3), 3 * 9), conv1_b=zeros(c1),
            conv2_w=he_normal(rng, (c2, c1, 3, 3), c1 * 9), conv2_b=zeros(c2),
            conv3_w=he_normal(rng, (c3, c2, 3, 3), c2 * 9), conv3_b=zeros(c3),
            conv4_w=he_normal(rng, (channels, c3, 3, 3), c3 * 9), conv4_b=zeros(channels),
        )

    @property
    def out_channels(self) -> int:
        return self.conv4_w.shape[0]


def backbone_forward(images, params: BackboneParams) -> Tensor:
    """``(N, 3, H, W)`` images -> ``(N, C_f, H/8, W/8)`` feature maps."""
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    x = T.relu(T.conv2d(x, params.conv1_w, params.conv1_b, stride=2, padding=1))
    x = T.relu(T.conv2d(x, params.conv2_w, params.conv2_b, stride=2, padding=1))
    x = T.relu(T.conv2d(x, params.conv3_w, params.conv3_b, stride=2, padding=1))
    return T.relu(T.conv2d(x, params.conv4_w, params.conv4_b, stride=1, padding=1))
