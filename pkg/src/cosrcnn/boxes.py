"""Axis-aligned box geometry in ``(x1, y1, x2, y2)`` pixel coordinates.

Widths are ``x2 - x1`` (continuous coordinates, no +1 convention).
"""

from __future__ import annotations

import numpy as np

# Largest log-scale delta applied when decoding, as in common detectors.
DELTA_CLAMP = float(np.log(1000.0 / 16))


def as_boxes(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    if b.ndim == 1:
        b = b[None, :]
    if b.size == 0:
        return np.zeros((0, 4))
    if b.shape[-1] != 4:
        raise ValueError(f"boxes must have 4 coordinates, got shape {b.shape}")
    return b


def area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``; degenerate boxes give 0."""
    a, b = as_boxes(a), as_boxes(b)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(box_a, box_b) -> float:
    return float(iou_matrix(box_a, box_b)[0, 0])


def clip_boxes(boxes, width: float, height: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    return b


def hflip_boxes(boxes, width: float) -> np.ndarray:
    b = as_boxes(boxes).copy()
    x1 = width - b[:, 2]
    x2 = width - b[:, 0]
    b[:, 0], b[:, 2] = x1, x2
    return b


def _center_size(b: np.ndarray):
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def encode(boxes, anchors, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Regression targets ``(dx, dy, dw, dh)`` taking ``anchors`` to ``boxes``."""
    gx, gy, gw, gh = _center_size(as_boxes(boxes))
    ax, ay, aw, ah = _center_size(as_boxes(anchors))
    wx, wy, ww, wh = weights
    return np.stack([wx * (gx - ax) / aw, wy * (gy - ay) / ah,
                     ww * np.log(gw / aw), wh * np.log(gh / ah)], axis=1)


def decode(deltas, anchors, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Inverse of :func:`encode`; log-scale terms are clamped at ``DELTA_CLAMP``."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _center_size(as_boxes(anchors))
    wx, wy, ww, wh = weights
    cx = d[:, 0] / wx * aw + ax
    cy = d[:, 1] / wy * ah + ay
    w = np.exp(np.minimum(d[:, 2] / ww, DELTA_CLAMP)) * aw
    h = np.exp(np.minimum(d[:, 3] / wh, DELTA_CLAMP)) * ah
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    Equal scores are visited in ascending index order.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64)
    if len(b) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(s)), -s))
    ious = iou_matrix(b, b)
    suppressed = np.zeros(len(b), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.asarray(keep, dtype=np.int64)
