"""Exemplar embedding pathway: shared backbone, global average pooling, projection."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, backbone_forward
from .params import ParamGroup, he_normal, zeros
from .tensor import Tensor

EMBED_DIM = 16
MIN_CROP = 8


@dataclass
class EmbedderParams(ParamGroup):
    weight: Tensor  # (C_f, D)
    bias: Tensor    # (D,)

    @classmethod
    def init(cls, rng: np.random.Generator, in_channels: int = 32, dim: int = EMBED_DIM) -> EmbedderParams:
        return cls(weight=he_normal(rng, (in_channels, dim), in_channels), bias=zeros(dim))

    @property
    def dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ExemplarEmbedding:
    class_id: int
    vector: Tensor
    shot_index: int = 0


def embed_crops(crops, backbone: BackboneParams, embedder: EmbedderParams) -> Tensor:
    """Embed a batch of crops ``(N, 3, S, S)`` into ``(N, D)`` weight vectors."""
    x = crops if isinstance(crops, Tensor) else Tensor(crops)
    if x.ndim == 3:
        x = x.reshape((1,) + x.shape)
    if x.shape[2] < MIN_CROP or x.shape[3] < MIN_CROP:
        raise ValueError(f"exemplar crops must be at least {MIN_CROP}x{MIN_CROP}, got {x.shape[2:]}")
    pooled = T.global_avg_pool(backbone_forward(x, backbone))
    return T.linear(pooled, embedder.weight, embedder.bias)


def embed_exemplar(crop, backbone: BackboneParams, embedder: EmbedderParams,
                   class_id: int = 0, shot_index: int = 0) -> ExemplarEmbedding:
    vec = embed_crops(crop, backbone, embedder)
    return ExemplarEmbedding(class_id, vec.reshape((embedder.dim,)), shot_index)


def average_shots(embs: Sequence[ExemplarEmbedding]) -> ExemplarEmbedding:
    """Per-channel mean of same-class shot embeddings."""
    if not embs:
        raise ValueError("average_shots needs at least one embedding")
    classes = {e.class_id for e in embs}
    if len(classes) != 1:
        raise ValueError(f"average_shots got mixed classes {sorted(classes)}")
    dims = {e.vector.shape for e in embs}
    if len(dims) != 1:
        raise ValueError(f"average_shots got mixed dimensions {sorted(dims)}")
    if len(embs) == 1:
        return ExemplarEmbedding(embs[0].class_id, embs[0].vector, 0)
    # Sorting the rows makes the float sum independent of shot order.
    rows = T.stack([e.vector for e in embs])
    order = np.lexsort(rows.data.T[::-1])
    mean = T.reduce_mean(rows[order], axis=0)
    return ExemplarEmbedding(embs[0].class_id, mean, 0)


def average_shot_matrix(vectors: Tensor, way: int, shot: int) -> Tensor:
    """``(way * shot, D)`` class-major embeddings -> ``(way, D)`` per-class means."""
    if vectors.shape[0] != way * shot:
        raise ValueError(f"expected {way * shot} exemplar rows, got {vectors.shape[0]}")
    if shot == 1:
        return vectors
    rows = [average_shots([ExemplarEmbedding(0, vectors[i * shot + k]) for k in range(shot)]).vector
            for i in range(way)]
    return T.stack(rows)
