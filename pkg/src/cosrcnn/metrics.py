"""IoU matching and AP50 with 101-point interpolation, pooled across episodes."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .boxes import as_boxes, iou, iou_matrix

__all__ = ["iou", "MatchResult", "match_detections", "average_precision", "APAccumulator"]

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class MatchResult:
    scores: np.ndarray      # (N,) detection scores in input order
    tp: np.ndarray          # (N,) bool, True for a true positive
    gt_matched: np.ndarray  # (G,) bool
    class_id: int = 0

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp

    @property
    def num_gt(self) -> int:
        return len(self.gt_matched)


def match_detections(boxes, scores, gts, iou_thresh: float = 0.5, class_id: int = 0) -> MatchResult:
    """Greedy VOC-style matching for one class in one image.

    Detections are visited by descending score (ties by input order); each
    takes the unmatched GT with the highest IoU if that IoU reaches
    ``iou_thresh``, otherwise it is a false positive.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    g = as_boxes(gts)
    tp = np.zeros(len(b), dtype=bool)
    matched = np.zeros(len(g), dtype=bool)
    if len(b) and len(g):
        ious = iou_matrix(b, g)
        for i in np.lexsort((np.arange(len(s)), -s)):
            cand = np.where(matched, -1.0, ious[i])
            j = int(np.argmax(cand))
            if cand[j] >= iou_thresh:
                tp[i] = True
                matched[j] = True
    return MatchResult(s, tp, matched, class_id)


def average_precision(scores: Sequence[float], tp: Sequence[bool], num_gt: int) -> float:
    """COCO-style 101-point interpolated AP of a pooled ranked list."""
    if num_gt <= 0:
        raise ValueError("average precision needs at least one ground-truth box")
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(tp, dtype=bool)
    if len(s) == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    t = t[order]
    ctp = np.cumsum(t)
    cfp = np.cumsum(~t)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    # Precision envelope: best precision at any recall >= r.
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    vals = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(vals.mean())


@dataclass
class APAccumulator:
    """Folds per-image match results into per-class pooled ranked lists."""

    scores: dict[int, list[np.ndarray]] = field(default_factory=dict)
    tps: dict[int, list[np.ndarray]] = field(default_factory=dict)
    num_gt: dict[int, int] = field(default_factory=dict)

    def add(self, result: MatchResult) -> None:
        c = result.class_id
        self.scores.setdefault(c, []).append(result.scores)
        self.tps.setdefault(c, []).append(result.tp)
        self.num_gt[c] = self.num_gt.get(c, 0) + result.num_gt

    def add_image(self, det_boxes, det_scores, det_classes, gt_boxes, gt_classes,
                  classes: Iterable[int], iou_thresh: float = 0.5) -> None:
        """Match one image's detections against its GT for each evaluated class."""
        db, ds = as_boxes(det_boxes), np.asarray(det_scores, dtype=np.float64).reshape(-1)
        dc = np.asarray(det_classes).reshape(-1)
        gb, gc = as_boxes(gt_boxes), np.asarray(gt_classes).reshape(-1)
        for c in classes:
            self.add(match_detections(db[dc == c], ds[dc == c], gb[gc == c], iou_thresh, int(c)))

    def compute(self) -> tuple[dict[int, float], float, list[int]]:
        """Per-class AP, their mean, and classes skipped for having no GT."""
        per_class: dict[int, float] = {}
        excluded = []
        for c in sorted(self.num_gt):
            if self.num_gt[c] == 0:
                excluded.append(c)
                continue
            s = np.concatenate(self.scores[c]) if self.scores[c] else np.zeros(0)
            t = np.concatenate(self.tps[c]) if self.tps[c] else np.zeros(0, dtype=bool)
            per_class[c] = average_precision(s, t, self.num_gt[c])
        mean = float(np.mean(list(per_class.values()))) if per_class else 0.0
        return per_class, mean, excluded
