"""Cosine comparator box-classification head.

Class logits come from comparing query RoI embeddings ``x`` with exemplar
embeddings ``w``; a learned linear background logit is concatenated in
front, so posterior column 0 is always background and column ``i`` is the
``i``-th episode class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamGroup, normal
from .tensor import Tensor

MODES = ("cosine", "cosine_no_affine", "cosine_scale_only", "l2")
OBJECTIVES = ("softmax", "sigmoid")


@dataclass
class ComparatorParams(ParamGroup):
    gamma: Tensor
    beta: Tensor
    bg_weights: Tensor  # (D,)
    bg_bias: Tensor
    mode: str = "cosine"
    objective: str = "softmax"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown comparator mode '{self.mode}', expected one of {MODES}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective '{self.objective}', expected one of {OBJECTIVES}")

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, mode: str = "cosine",
             objective: str = "softmax") -> ComparatorParams:
        return cls(gamma=Tensor(1.0, requires_grad=True), beta=Tensor(0.0, requires_grad=True),
                   bg_weights=normal(rng, (dim,), 0.01), bg_bias=Tensor(0.0, requires_grad=True),
                   mode=mode, objective=objective)

    def trainable(self) -> list[Tensor]:
        out = []
        if self.mode in ("cosine", "cosine_scale_only"):
            out.append(self.gamma)
        if self.mode == "cosine":
            out.append(self.beta)
        if self.objective == "softmax":
            out += [self.bg_weights, self.bg_bias]
        return out


@dataclass
class ClassLogits:
    """Per-exemplar logits ``(R, m, n)`` and background logits ``(R,)``."""

    exemplar: Tensor
    background: Tensor

    @property
    def way(self) -> int:
        return self.exemplar.shape[1]

    @property
    def shot(self) -> int:
        return self.exemplar.shape[2]


def _check_dims(w: Tensor, x: Tensor) -> None:
    if w.shape[-1] != x.shape[-1]:
        raise T.ShapeError(f"embedding dimensions differ: {w.shape[-1]} vs {x.shape[-1]}")


def cosine_similarity(w: Tensor, x: Tensor) -> Tensor:
    _check_dims(w, x)
    return T.reduce_sum(T.l2_normalize(w) * T.l2_normalize(x))


def scaled_cosine(w: Tensor, x: Tensor, params: ComparatorParams) -> Tensor:
    return _affine(cosine_similarity(w, x), params)


def _affine(cos: Tensor, params: ComparatorParams) -> Tensor:
    if params.mode == "cosine":
        return cos * params.gamma + params.beta
    if params.mode == "cosine_scale_only":
        return cos * params.gamma
    return cos


def l2_logits(w: Tensor, x: Tensor) -> Tensor:
    """Negated squared Euclidean distance between two vectors."""
    _check_dims(w, x)
    d = w - x
    return -T.reduce_sum(d * d)


def pairwise_logits(x: Tensor, w: Tensor, params: ComparatorParams) -> Tensor:
    """Logits of every RoI ``x (R, D)`` against every exemplar ``w (K, D)`` -> ``(R, K)``."""
    _check_dims(w, x)
    if params.mode == "l2":
        r, k = x.shape[0], w.shape[0]
        xx = T.reduce_sum(x * x, axis=1, keepdims=True)          # (R, 1)
        ww = T.reduce_sum(w * w, axis=1, keepdims=True)          # (K, 1)
        sq = xx @ Tensor(np.ones((1, k))) + Tensor(np.ones((r, 1))) @ ww.T - (x @ w.T) * 2.0
        return -sq
    cos = T.l2_normalize(x) @ T.l2_normalize(w).T
    return _affine(cos, params)


def background_logit(x: Tensor, params: ComparatorParams) -> Tensor:
    """Linear background score; ``(D,)`` -> scalar, ``(R, D)`` -> ``(R,)``."""
    single = x.ndim == 1
    xs = x.reshape((1, x.shape[0])) if single else x
    d = params.bg_weights.shape[0]
    out = T.linear(xs, params.bg_weights.reshape((d, 1))).reshape((xs.shape[0],)) + params.bg_bias
    return out.reshape(()) if single else out


def class_logits(x: Tensor, exemplars: Tensor, way: int, shot: int, params: ComparatorParams) -> ClassLogits:
    """Logits for RoIs ``x (R, D)`` against class-major exemplars ``(way * shot, D)``."""
    if exemplars.shape[0] != way * shot:
        raise ValueError(f"expected {way}x{shot} exemplars, got {exemplars.shape[0]} rows")
    flat = pairwise_logits(x, exemplars, params)
    return ClassLogits(flat.reshape((x.shape[0], way, shot)), background_logit(x, params))


def joint_logits(logits: ClassLogits) -> Tensor:
    """Background-first logits ``(R, m + 1)`` used by the softmax objective."""
    r = logits.exemplar.shape[0]
    per_class = T.logsumexp(logits.exemplar, axis=2)  # (R, m); exact identity when n == 1
    return T.concat([logits.background.reshape((r, 1)), per_class], axis=1)


def posterior_nshot(logits: ClassLogits) -> Tensor:
    """``(R, m + 1)`` posterior; class mass sums the exponentiated shot logits."""
    if logits.way == 0:
        raise ValueError("posterior needs at least one class")
    return T.exp(T.log_softmax(joint_logits(logits), axis=1))


def posterior_1shot(logits: ClassLogits) -> Tensor:
    if logits.shot != 1:
        raise ValueError(f"posterior_1shot needs one shot per class, got {logits.shot}")
    return posterior_nshot(logits)


def sigmoid_objective_scores(logits: ClassLogits) -> Tensor:
    """Independent per-exemplar probabilities ``(R, m, n)``; no background term."""
    return T.sigmoid(logits.exemplar)


def classification_loss(logits: ClassLogits, targets, objective: str) -> Tensor:
    """Training loss for 0 = background / ``i`` = class slot ``i`` targets."""
    t = np.asarray(targets, dtype=np.int64)
    if objective == "softmax":
        return T.softmax_cross_entropy(joint_logits(logits), t)
    if objective == "sigmoid":
        r, m, n = logits.exemplar.shape
        onehot = np.zeros((r, m, n))
        fg = t > 0
        onehot[np.nonzero(fg)[0], t[fg] - 1, :] = 1.0
        return T.binary_cross_entropy_with_logits(logits.exemplar, onehot, normalizer=r)
    raise ValueError(f"unknown objective '{objective}'")

