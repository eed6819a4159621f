"""Episodic training: target assignment, loss assembly and the SGD loop."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import boxes as box_ops
from . import tensor as T
from .backbone import BackboneParams, backbone_forward
from .checkpoint import Checkpoint
from .comparator import classification_loss
from .config import RunConfig
from .detector import (ANCHORS, BOX_WEIGHTS, RPN_TOP_K_TRAIN, CosRCNN, box_head_forward,
                       roi_pool, rpn_forward, rpn_propose)
from .embedder import EmbedderParams, embed_crops
from .episodes import ClassSplit, Episode, InstanceIndex, generate_dataset, sample_training_episode
from .optim import SGD, learning_rate
from .sumoco import MomentumPair, SuMoCoQueue, momentum_update, sumoco_loss
from .tensor import Tensor

log = logging.getLogger(__name__)

RPN_POS_IOU = 0.5
RPN_NEG_IOU = 0.3
RPN_BATCH = 32
ROI_BATCH = 16
ROI_FG_FRACTION = 0.25
ROI_FG_IOU = 0.5
ROI_BG_IOU = 0.4
RPN_SMOOTH_L1_BETA = 1.0 / 9.0
LOG_EVERY = 50
CHECKPOINT_EVERY = 1000


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, episode: Episode, reason: str):
        super().__init__(f"non-finite loss at iteration {iteration} "
                         f"(episode seed {episode.episode_seed}): {reason}")
        self.iteration = iteration
        self.episode = episode
        self.episode_seed = episode.episode_seed


# ---------------------------------------------------------------------------
# target assignment
# ---------------------------------------------------------------------------

def assign_anchors(anchors: np.ndarray, gt: np.ndarray,
                   pos_iou: float = RPN_POS_IOU, neg_iou: float = RPN_NEG_IOU):
    """Anchor labels (1 positive, 0 negative, -1 ignored) and matched GT index.

    Besides the IoU threshold, each GT's best anchor (lowest index on ties)
    is forced positive so every object has at least one.
    """
    labels = -np.ones(len(anchors), dtype=np.int64)
    if len(gt) == 0:
        labels[:] = 0
        return labels, np.zeros(len(anchors), dtype=np.int64)
    ious = box_ops.iou_matrix(anchors, gt)
    best_gt = ious.argmax(axis=1)
    best = ious.max(axis=1)
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    for g in range(len(gt)):
        a = int(np.argmax(ious[:, g]))
        if ious[a, g] > 0:
            labels[a] = 1
            best_gt[a] = g
    return labels, best_gt


def _subsample(pos: np.ndarray, neg: np.ndarray, total: int, fg_fraction: float,
               rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n_pos = min(len(pos), int(round(total * fg_fraction)))
    pos = rng.permutation(pos)[:n_pos]
    neg = rng.permutation(neg)[:total - n_pos]
    return np.sort(pos), np.sort(neg)


def sample_rois(proposals: np.ndarray, gt: np.ndarray, gt_labels: np.ndarray, rng: np.random.Generator,
                num: int = ROI_BATCH, fg_fraction: float = ROI_FG_FRACTION):
    """Sample training RoIs; returns ``(rois, targets, matched_gt)``.

    Targets are 0 for background and ``slot + 1`` for foreground; RoIs with
    IoU in ``[ROI_BG_IOU, ROI_FG_IOU)`` are never sampled.
    """
    cand = np.concatenate([proposals, gt], axis=0) if len(gt) else proposals
    if len(gt):
        ious = box_ops.iou_matrix(cand, gt)
        best = ious.max(axis=1)
        match = ious.argmax(axis=1)
    else:
        best = np.zeros(len(cand))
        match = np.zeros(len(cand), dtype=np.int64)
    fg = np.nonzero(best >= ROI_FG_IOU)[0]
    bg = np.nonzero(best < ROI_BG_IOU)[0]
    fg, bg = _subsample(fg, bg, num, fg_fraction, rng)
    keep = np.concatenate([fg, bg])
    targets = np.zeros(len(keep), dtype=np.int64)
    targets[:len(fg)] = gt_labels[match[fg]] + 1 if len(fg) else 0
    return cand[keep], targets, match[keep]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossParts:
    total: Tensor
    parts: dict[str, float]
    exemplars: Tensor


def compute_losses(model: CosRCNN, episode: Episode, rng: np.random.Generator,
                   queue: SuMoCoQueue | None = None) -> LossParts:
    """Forward one training episode and return the summed detection loss."""
    gt = episode.query_boxes[0]
    gt_slots = episode.query_labels[0]
    image = Tensor(episode.query_pixels[0][None])
    fmap = backbone_forward(image, model.backbone)
    exemplars = embed_crops(episode.exemplar_crops, model.backbone, model.embedder)

    rpn_logits, rpn_deltas = rpn_forward(fmap, model.rpn, model.rpn_variant, exemplars)
    labels, matched = assign_anchors(ANCHORS, gt)
    pos, neg = _subsample(np.nonzero(labels == 1)[0], np.nonzero(labels == 0)[0], RPN_BATCH, 0.5, rng)
    sampled = np.concatenate([pos, neg])
    rpn_cls = T.binary_cross_entropy_with_logits(rpn_logits[sampled], (labels[sampled] == 1).astype(float))
    parts = {"rpn_cls": rpn_cls}
    if len(pos):
        rpn_targets = box_ops.encode(gt[matched[pos]], ANCHORS[pos])
        parts["rpn_reg"] = T.smooth_l1(rpn_deltas[pos], rpn_targets, RPN_SMOOTH_L1_BETA,
                                       normalizer=len(sampled))

    proposals, _ = rpn_propose(rpn_logits.data, rpn_deltas.data, RPN_TOP_K_TRAIN)
    rois, targets, match = sample_rois(proposals, gt, gt_slots, rng)
    feats = roi_pool(fmap, rois)
    logits, _, deltas, x = box_head_forward(feats, exemplars, episode.way, 1, model.head, model.comparator)
    if queue is not None:
        parts["cls"] = sumoco_loss([(x, targets)], exemplars, episode.classes, queue, model.comparator).loss
    else:
        parts["cls"] = classification_loss(logits, targets, model.comparator.objective)
    fg = np.nonzero(targets > 0)[0]
    if len(fg):
        reg_targets = box_ops.encode(gt[match[fg]], rois[fg], BOX_WEIGHTS)
        parts["box_reg"] = T.smooth_l1(deltas[fg], reg_targets, 1.0, normalizer=len(rois))

    total = parts["rpn_cls"]
    for name in ("rpn_reg", "cls", "box_reg"):
        if name in parts:
            total = total + parts[name]
    return LossParts(total, {k: v.item() for k, v in parts.items()}, exemplars)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class SuMoCoState:
    pair: MomentumPair
    queue: SuMoCoQueue
    key_backbone: BackboneParams
    key_embedder: EmbedderParams

    @classmethod
    def create(cls, model: CosRCNN, queue_size: int, alpha: float) -> SuMoCoState:
        pair = MomentumPair.duplicate(model.exemplar_pathway(), alpha)
        return cls(pair, SuMoCoQueue(queue_size, model.embedder.dim), *_key_groups(model, pair.key))

    def key_features(self, crops: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return embed_crops(crops, self.key_backbone, self.key_embedder).data


def _key_groups(model: CosRCNN, key: dict[str, Tensor]):
    bb = BackboneParams(**{n: key[f"backbone/{n}"] for n in model.backbone.named()})
    em = EmbedderParams(**{n: key[f"embedder/{n}"] for n in model.embedder.named()})
    return bb, em


@dataclass
class Trainer:
    config: RunConfig
    model: CosRCNN
    optimizer: SGD
    rng: np.random.Generator
    dataset: list
    index: InstanceIndex
    split: ClassSplit
    sumoco: SuMoCoState | None = None
    iteration: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, config: RunConfig) -> Trainer:
        c = config.comparator
        model = CosRCNN.init(config.seed, c.mode, c.objective, config.rpn_variant)
        split = ClassSplit(tuple(config.split.base), tuple(config.split.novel))
        dataset = generate_dataset(config.dataset.seed, config.dataset.num_images, split.base)
        s = config.schedule
        opt = SGD(model.trainable_parameters(), s.momentum, s.weight_decay)
        sumoco = None
        if config.sumoco.enabled:
            sumoco = SuMoCoState.create(model, config.sumoco.queue_size, config.sumoco.alpha)
        rng = np.random.default_rng([config.seed, 1])
        return cls(config, model, opt, rng, dataset, InstanceIndex(dataset), split, sumoco)

    def checkpoint(self) -> Checkpoint:
        """Snapshot everything needed to resume training bitwise."""
        names = {id(t): n for n, t in self.model.named_parameters().items()}
        velocity = {names[id(p)]: v.copy() for i, p in enumerate(self.optimizer.params)
                    if (v := self.optimizer.velocity.get(i)) is not None}
        key, queue = {}, None
        if self.sumoco is not None:
            key = {n: t.data.copy() for n, t in self.sumoco.pair.key.items()}
            queue = self.sumoco.queue
        return Checkpoint(self.config, self.model, self.iteration, velocity, key, queue,
                          self.rng.bit_generator.state)

    @classmethod
    def resume(cls, ck: Checkpoint) -> Trainer:
        tr = cls.create(ck.config)
        params = tr.model.named_parameters()
        for name, t in ck.model.named_parameters().items():
            params[name].data = t.data.copy()
        index = {id(p): i for i, p in enumerate(tr.optimizer.params)}
        for name, v in ck.velocity.items():
            tr.optimizer.velocity[index[id(params[name])]] = v.copy()
        if tr.sumoco is not None:
            for name, v in ck.key_params.items():
                tr.sumoco.pair.key[name].data = v.copy()
            if ck.queue is not None:
                for e in ck.queue.entries:
                    tr.sumoco.queue.enqueue(e.feature[None], [e.class_id], e.iteration)
        if ck.rng_state is not None:
            tr.rng.bit_generator.state = ck.rng_state
        tr.iteration = ck.iteration
        return tr

    def lr(self, it: int) -> float:
        s = self.config.schedule
        return learning_rate(it, s.base_lr, s.warmup_steps, s.decay_steps, s.decay_factor)

    def sample_episode(self) -> Episode:
        return sample_training_episode(self.dataset, self.split, self.rng, way=self.config.way,
                                       shot=1, index=self.index)

    def step(self, episode: Episode | None = None) -> dict[str, float]:
        """One SGD update on the mean loss of ``episodes_per_iteration`` episodes.

        An explicit ``episode`` replaces the sampled batch with that single episode.
        """
        k = 1 if episode is not None else self.config.episodes_per_iteration
        eps = [episode] if episode is not None else [self.sample_episode() for _ in range(k)]
        self.optimizer.zero_grad()
        queue = self.sumoco.queue if self.sumoco is not None else None
        total = 0.0
        parts: dict[str, float] = {}
        for ep in eps:
            try:
                out = compute_losses(self.model, ep, self.rng, queue)
                value = out.total.item()
                if not np.isfinite(value):
                    raise FloatingPointError("loss is not finite")
                (out.total * (1.0 / k)).backward()
            except FloatingPointError as exc:
                raise TrainingDiverged(self.iteration, ep, str(exc)) from exc
            total += value / k
            for n, v in out.parts.items():
                parts[n] = parts.get(n, 0.0) + v / k
        lr = self.lr(self.iteration)
        self.optimizer.step(lr)
        if self.sumoco is not None:
            momentum_update(self.sumoco.pair)
            for ep in eps:
                feats = self.sumoco.key_features(ep.exemplar_crops)
                self.sumoco.queue.enqueue(feats, ep.classes, self.iteration)
        self.iteration += 1
        rec = {"iteration": self.iteration, "lr": lr, "loss": total, **parts}
        return rec

    def run(self, iterations: int | None = None, on_checkpoint: Callable[[Trainer], None] | None = None,
            checkpoint_every: int = CHECKPOINT_EVERY) -> list[dict]:
        n = self.config.iterations if iterations is None else iterations
        running: dict[str, float] = {}
        for _ in range(n):
            rec = self.step()
            for k, v in rec.items():
                if k not in ("iteration", "lr"):
                    running[k] = running.get(k, 0.0) + v
            if self.iteration % LOG_EVERY == 0:
                avg = {k: v / LOG_EVERY for k, v in running.items()}
                entry = {"iteration": self.iteration, "lr": rec["lr"], **avg}
                self.history.append(entry)
                log.info("iter %d lr %.5f %s", self.iteration, rec["lr"],
                         " ".join(f"{k}={v:.4f}" for k, v in avg.items()))
                running = {}
            if on_checkpoint is not None and self.iteration % checkpoint_every == 0:
                on_checkpoint(self)
        return self.history


def dump_episode(path: Path, episode: Episode) -> None:
    path.write_text(json.dumps(episode.to_json(), indent=1))
