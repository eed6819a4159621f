"""Supervised momentum contrast (Su-MoCo).

A slowly-moving duplicate of the exemplar pathway writes detached, labelled
exemplar features into a FIFO queue. During training every queue entry is
appended, one at a time, as an extra comparison logit to each RoI's softmax:
it counts towards the RoI's class when the labels agree and acts as a
negative otherwise. The loss averages the resulting negative
log-likelihoods over queue entries and RoIs.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .comparator import ComparatorParams, joint_logits, class_logits, pairwise_logits
from .tensor import Tensor

DEFAULT_QUEUE_SIZE = 100
DEFAULT_MOMENTUM = 0.999


def momentum_rule(q: int) -> float:
    """Suggested momentum ``1 - 1/q`` for a queue of size ``q`` (0 disables)."""
    if q < 0:
        raise ValueError(f"queue size must be non-negative, got {q}")
    if q == 0:
        return 0.0
    return 1.0 - 1.0 / q


@dataclass
class MomentumPair:
    """Live parameters ``query`` and their momentum duplicate ``key``."""

    query: Mapping[str, Tensor]
    key: dict[str, Tensor]
    alpha: float

    @classmethod
    def duplicate(cls, query: Mapping[str, Tensor], alpha: float) -> MomentumPair:
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {alpha}")
        key = {name: Tensor(t.data.copy(), requires_grad=False) for name, t in query.items()}
        return cls(dict(query), key, alpha)


def momentum_update(pair: MomentumPair) -> None:
    """``key <- alpha * key + (1 - alpha) * query`` element-wise; query untouched."""
    if pair.key.keys() != pair.query.keys():
        raise ValueError(f"parameter names drifted: {sorted(set(pair.key) ^ set(pair.query))}")
    a = pair.alpha
    for name, k in pair.key.items():
        q = pair.query[name]
        if k.shape != q.shape:
            raise ValueError(f"shape drift for '{name}': key {k.shape} vs query {q.shape}")
        k.data = a * k.data + (1.0 - a) * q.data


@dataclass(frozen=True)
class QueueEntry:
    feature: np.ndarray
    class_id: int
    iteration: int


class SuMoCoQueue:
    """Bounded FIFO of detached labelled features."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 0:
            raise ValueError(f"queue capacity must be non-negative, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self._entries: deque[QueueEntry] = deque()

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    @property
    def entries(self) -> list[QueueEntry]:
        return list(self._entries)

    def enqueue(self, features, labels: Sequence[int], iteration: int = 0) -> None:
        feats = features.data if isinstance(features, Tensor) else np.asarray(features, dtype=np.float64)
        feats = np.atleast_2d(feats)
        if feats.shape[1] != self.dim:
            raise ValueError(f"queue expects {self.dim}-dim features, got {feats.shape[1]}")
        if len(labels) != feats.shape[0]:
            raise ValueError(f"{feats.shape[0]} features but {len(labels)} labels")
        if self.capacity == 0:
            return
        for f, c in zip(feats, labels):
            self._entries.append(QueueEntry(np.array(f, dtype=np.float64), int(c), int(iteration)))
            if len(self._entries) > self.capacity:
                self._entries.popleft()

    def features(self) -> np.ndarray:
        if not self._entries:
            return np.zeros((0, self.dim))
        return np.stack([e.feature for e in self._entries])

    def labels(self) -> np.ndarray:
        return np.array([e.class_id for e in self._entries], dtype=np.int64)

    def clear(self) -> None:
        self._entries.clear()


@dataclass
class QueueLossReport:
    per_sample: np.ndarray  # mean negative log posterior per queue entry
    loss: Tensor


def sumoco_loss(roi_batches: Sequence[tuple[Tensor, np.ndarray]], exemplars: Tensor,
                exemplar_classes: Sequence[int], queue: SuMoCoQueue,
                params: ComparatorParams) -> QueueLossReport:
    """Averaged negative log-likelihood over queue-augmented posteriors.

    ``roi_batches`` holds ``(x, targets)`` pairs with ``x`` of shape ``(R, D)``
    and targets as 0 = background / ``i`` = the ``i``-th entry of
    ``exemplar_classes``. ``exemplars`` are the current episode's one-shot
    embeddings, shape ``(m, D)``.
    """
    if exemplars.shape[0] == 0 or not exemplar_classes:
        raise ValueError("sumoco_loss needs at least one current exemplar")
    if exemplars.shape[0] != len(exemplar_classes):
        raise ValueError(f"{exemplars.shape[0]} exemplars but {len(exemplar_classes)} class labels")
    if len(roi_batches) == 1:
        x, targets = roi_batches[0]
    else:
        x = T.concat([b[0] for b in roi_batches], axis=0)
        targets = np.concatenate([np.asarray(b[1]) for b in roi_batches])
    t = np.asarray(targets, dtype=np.int64)
    m = exemplars.shape[0]
    base = joint_logits(class_logits(x, exemplars, m, 1, params))  # (R, 1 + m)

    if len(queue) == 0:
        loss = T.softmax_cross_entropy(base, t)
        return QueueLossReport(np.zeros(0), loss)

    r = x.shape[0]
    q = len(queue)
    qlog = pairwise_logits(x, Tensor(queue.features()), params)  # (R, Q), no grad into the queue
    ones = Tensor(np.ones((1, q)))
    lse_base = T.logsumexp(base, axis=1).reshape((r, 1)) @ ones
    target_logit = base[np.arange(r), t].reshape((r, 1)) @ ones
    denom = T.logaddexp(lse_base, qlog)
    slot_class = np.array([-1] + [int(c) for c in exemplar_classes])
    match = (slot_class[t][:, None] == queue.labels()[None, :]) & (t[:, None] > 0)
    numer = T.where(match, T.logaddexp(target_logit, qlog), target_logit)
    nll = denom - numer  # (R, Q)
    per_sample = nll.data.mean(axis=0)
    return QueueLossReport(per_sample, T.reduce_mean(nll))
