"""Two-stage detection pipeline around the comparator head.

Backbone feature map (stride 8) -> anchor RPN -> grid RoI pooling -> box head
(class-agnostic regression + exemplar comparison) -> per-class NMS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import boxes as box_ops
from . import tensor as T
from .backbone import FEATURE_CHANNELS, STRIDE, BackboneParams, backbone_forward
from .comparator import (ClassLogits, ComparatorParams, background_logit, class_logits,
                         posterior_nshot, sigmoid_objective_scores)
from .embedder import EMBED_DIM, EmbedderParams, average_shot_matrix, embed_crops
from .params import ParamGroup, he_normal, normal, zeros
from .tensor import Tensor

IMAGE_SIZE = 64
GRID = IMAGE_SIZE // STRIDE
ANCHOR_SIZES = (12.0, 24.0, 40.0)
NUM_ANCHORS = len(ANCHOR_SIZES)
POOL_SIZE = 4
HEAD_HIDDEN = 64
BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)

RPN_NMS_IOU = 0.7
RPN_TOP_K_TRAIN = 64
RPN_TOP_K_TEST = 32
DET_NMS_IOU = 0.5
SCORE_THRESHOLD = 0.05
MAX_DETECTIONS = 20

RPN_VARIANTS = ("standard", "cos_linear")
AGGREGATIONS = ("sum_scores", "feature_average")


def make_anchors(grid: int = GRID, stride: int = STRIDE, sizes: Sequence[float] = ANCHOR_SIZES) -> np.ndarray:
    """Square anchors centred on each cell, ordered ``(row, col, size)``."""
    out = []
    for y in range(grid):
        for x in range(grid):
            cx, cy = (x + 0.5) * stride, (y + 0.5) * stride
            for s in sizes:
                out.append([cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2])
    return np.asarray(out, dtype=np.float64)


ANCHORS = make_anchors()


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass
class RPNParams(ParamGroup):
    conv_w: Tensor
    conv_b: Tensor
    obj_w: Tensor
    obj_b: Tensor
    delta_w: Tensor
    delta_b: Tensor
    embed_w: Tensor  # cos_linear variant only
    embed_b: Tensor
    gamma: Tensor
    beta: Tensor

    @classmethod
    def init(cls, rng, channels: int = FEATURE_CHANNELS, dim: int = EMBED_DIM,
             anchors: int = NUM_ANCHORS) -> RPNParams:
        return cls(
            conv_w=he_normal(rng, (channels, channels, 3, 3), channels * 9), conv_b=zeros(channels),
            obj_w=normal(rng, (channels, anchors), 0.01), obj_b=zeros(anchors),
            delta_w=normal(rng, (channels, 4 * anchors), 0.01), delta_b=zeros(4 * anchors),
            embed_w=he_normal(rng, (channels, dim), channels), embed_b=zeros(dim),
            gamma=Tensor(1.0, requires_grad=True), beta=Tensor(0.0, requires_grad=True),
        )

    def trainable(self, variant: str) -> list[Tensor]:
        shared = [self.conv_w, self.conv_b, self.delta_w, self.delta_b]
        if variant == "standard":
            return shared + [self.obj_w, self.obj_b]
        return shared + [self.embed_w, self.embed_b, self.gamma, self.beta]


@dataclass
class BoxHeadParams(ParamGroup):
    fc1_w: Tensor
    fc1_b: Tensor
    emb_w: Tensor
    emb_b: Tensor
    delta_w: Tensor
    delta_b: Tensor

    @classmethod
    def init(cls, rng, channels: int = FEATURE_CHANNELS, dim: int = EMBED_DIM,
             hidden: int = HEAD_HIDDEN) -> BoxHeadParams:
        fan = channels * POOL_SIZE * POOL_SIZE
        return cls(
            fc1_w=he_normal(rng, (fan, hidden), fan), fc1_b=zeros(hidden),
            emb_w=he_normal(rng, (hidden, dim), hidden), emb_b=zeros(dim),
            delta_w=normal(rng, (hidden, 4), 0.001), delta_b=zeros(4),
        )


@dataclass
class Detection:
    box: np.ndarray
    class_id: int
    score: float


# ---------------------------------------------------------------------------
# region proposals
# ---------------------------------------------------------------------------

def _cells(fmap: Tensor) -> Tensor:
    """``(1, C, H, W)`` -> ``(H * W, C)`` row-major cells."""
    _, c, h, w = fmap.shape
    return fmap.reshape((c, h * w)).T


def rpn_hidden(fmap: Tensor, params: RPNParams) -> Tensor:
    return _cells(T.relu(T.conv2d(fmap, params.conv_w, params.conv_b, stride=1, padding=1)))


def cos_rpn_objectness(hidden: Tensor, exemplars: Tensor, params: RPNParams) -> Tensor:
    """Per-cell objectness: max over exemplars of the scaled cosine to the embedded cell."""
    if exemplars is None or exemplars.shape[0] == 0:
        raise ValueError("cos RPN objectness needs at least one exemplar")
    emb = T.linear(hidden, params.embed_w, params.embed_b)
    cos = T.l2_normalize(emb) @ T.l2_normalize(exemplars).T
    return T.reduce_max(cos * params.gamma + params.beta, axis=1)


def rpn_forward(fmap: Tensor, params: RPNParams, variant: str = "standard",
                exemplars: Tensor | None = None) -> tuple[Tensor, Tensor]:
    """Objectness logits ``(N_anchors,)`` and deltas ``(N_anchors, 4)``."""
    if variant not in RPN_VARIANTS:
        raise ValueError(f"unknown rpn variant '{variant}'")
    hidden = rpn_hidden(fmap, params)
    cells = hidden.shape[0]
    a = params.obj_w.shape[1]
    deltas = T.linear(hidden, params.delta_w, params.delta_b).reshape((cells * a, 4))
    if variant == "standard":
        logits = T.linear(hidden, params.obj_w, params.obj_b).reshape((cells * a,))
    else:
        per_cell = cos_rpn_objectness(hidden, exemplars, params).reshape((cells, 1))
        logits = (per_cell @ Tensor(np.ones((1, a)))).reshape((cells * a,))
    return logits, deltas


def rpn_propose(logits: np.ndarray, deltas: np.ndarray, top_k: int,
                anchors: np.ndarray = ANCHORS, image_size: int = IMAGE_SIZE,
                nms_iou: float = RPN_NMS_IOU) -> tuple[np.ndarray, np.ndarray]:
    """Decode, clip, suppress at ``nms_iou`` and keep the ``top_k`` best proposals.

    Equal objectness is ranked by anchor index.
    """
    scores = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    boxes = box_ops.clip_boxes(box_ops.decode(deltas, anchors), image_size, image_size)
    valid = (boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0)
    idx = np.nonzero(valid)[0]
    keep = idx[box_ops.nms(boxes[idx], scores[idx], nms_iou)][:top_k]
    return boxes[keep], scores[keep]


# ---------------------------------------------------------------------------
# RoI pooling and box head
# ---------------------------------------------------------------------------

def _bin_cells(lo: float, hi: float, grid: int) -> np.ndarray:
    first = int(np.ceil(lo - 0.5))
    last = int(np.ceil(hi - 0.5)) - 1
    first, last = max(first, 0), min(last, grid - 1)
    if last < first:
        c = int(np.clip(np.floor(0.5 * (lo + hi)), 0, grid - 1))
        return np.array([c])
    return np.arange(first, last + 1)


def pool_matrix(box, grid: int = GRID, stride: int = STRIDE, out: int = POOL_SIZE) -> np.ndarray:
    """Averaging weights ``(out * out, grid * grid)`` for one box.

    Each output bin averages the feature cells whose centres fall inside the
    bin; a bin narrower than a cell takes the cell nearest its centre.
    """
    b = box_ops.clip_boxes(box, grid * stride, grid * stride)[0] / stride
    if b[2] - b[0] <= 0 or b[3] - b[1] <= 0:
        raise ValueError(f"roi_pool: zero-area box {np.asarray(box).tolist()}")
    return np.einsum("ir,jc->ijrc", _axis_weights(b[1], b[3], grid, out),
                     _axis_weights(b[0], b[2], grid, out)).reshape(out * out, grid * grid)


def _axis_weights(lo: float, hi: float, grid: int, out: int) -> np.ndarray:
    edges = np.linspace(lo, hi, out + 1)
    wts = np.zeros((out, grid))
    for i in range(out):
        cells = _bin_cells(edges[i], edges[i + 1], grid)
        wts[i, cells] = 1.0 / len(cells)
    return wts


def roi_pool(fmap: Tensor, rois, out: int = POOL_SIZE) -> Tensor:
    """Pool each RoI to ``out x out`` cells; returns ``(R, out * out * C)`` (bin-major)."""
    rois = box_ops.as_boxes(rois)
    _, c, h, w = fmap.shape
    if h != w:
        raise T.ShapeError(f"roi_pool expects a square map, got {h}x{w}")
    stride = IMAGE_SIZE // h
    p = np.concatenate([pool_matrix(b, h, stride, out) for b in rois], axis=0)
    pooled = fmap.reshape((c, h * w)) @ Tensor(p.T)        # (C, R * out * out)
    return pooled.T.reshape((len(rois), out * out * c))


def box_head_forward(roi_feats: Tensor, exemplars: Tensor | None, way: int, shot: int,
                     head: BoxHeadParams, comparator: ComparatorParams):
    """Returns ``(ClassLogits or None, background logits, deltas (R, 4), embeddings (R, D))``."""
    hidden = T.relu(T.linear(roi_feats, head.fc1_w, head.fc1_b))
    x = T.linear(hidden, head.emb_w, head.emb_b)
    deltas = T.linear(hidden, head.delta_w, head.delta_b)
    if exemplars is None or way == 0:
        return None, background_logit(x, comparator), deltas, x
    logits = class_logits(x, exemplars, way, shot, comparator)
    return logits, logits.background, deltas, x


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------

def nms_detections(dets: Sequence[Detection], iou_threshold: float = DET_NMS_IOU) -> list[Detection]:
    """Greedy per-class suppression; equal scores keep the lower list index."""
    kept: list[tuple[int, Detection]] = []
    for cls in sorted({d.class_id for d in dets}):
        idx = [i for i, d in enumerate(dets) if d.class_id == cls]
        boxes = np.stack([dets[i].box for i in idx])
        scores = np.array([dets[i].score for i in idx])
        for k in box_ops.nms(boxes, scores, iou_threshold):
            kept.append((idx[k], dets[idx[k]]))
    kept.sort(key=lambda p: (-p[1].score, p[0]))
    return [d for _, d in kept]


def assemble(proposals: np.ndarray, deltas: np.ndarray, scores: np.ndarray,
             background: np.ndarray | None, class_ids: Sequence[int],
             image_size: int = IMAGE_SIZE) -> list[Detection]:
    """Turn per-RoI class scores into final detections.

    ``scores`` is ``(R, m)``; ``background`` is ``(R,)`` for the softmax
    objective (RoIs whose background probability beats every class are
    dropped) or ``None`` for independent sigmoid scores.
    """
    if len(proposals) == 0:
        return []
    boxes = box_ops.clip_boxes(box_ops.decode(deltas, proposals, BOX_WEIGHTS), image_size, image_size)
    dets = []
    for r in range(len(proposals)):
        b = boxes[r]
        if b[2] - b[0] < 1.0 or b[3] - b[1] < 1.0:
            continue
        if background is not None and background[r] > scores[r].max():
            continue
        for k, cid in enumerate(class_ids):
            s = float(scores[r, k])
            if s >= SCORE_THRESHOLD:
                dets.append(Detection(b.copy(), int(cid), min(max(s, 0.0), 1.0)))
    return nms_detections(dets)[:MAX_DETECTIONS]


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

@dataclass
class CosRCNN:
    backbone: BackboneParams
    embedder: EmbedderParams
    rpn: RPNParams
    head: BoxHeadParams
    comparator: ComparatorParams
    rpn_variant: str = "standard"
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int, mode: str = "cosine", objective: str = "softmax",
             rpn_variant: str = "standard") -> CosRCNN:
        if rpn_variant not in RPN_VARIANTS:
            raise ValueError(f"unknown rpn variant '{rpn_variant}'")
        rng = np.random.default_rng(seed)
        backbone = BackboneParams.init(rng)
        embedder = EmbedderParams.init(rng, backbone.out_channels, EMBED_DIM)
        rpn = RPNParams.init(rng, backbone.out_channels, EMBED_DIM)
        head = BoxHeadParams.init(rng, backbone.out_channels, EMBED_DIM)
        comparator = ComparatorParams.init(rng, EMBED_DIM, mode, objective)
        return cls(backbone, embedder, rpn, head, comparator, rpn_variant)

    def groups(self) -> dict[str, ParamGroup]:
        return {"backbone": self.backbone, "embedder": self.embedder, "rpn": self.rpn,
                "head": self.head, "comparator": self.comparator}

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{g}/{n}": t for g, grp in self.groups().items() for n, t in grp.named().items()}

    def trainable_parameters(self) -> list[Tensor]:
        return (self.backbone.tensors() + self.embedder.tensors() + self.rpn.trainable(self.rpn_variant)
                + self.head.tensors() + self.comparator.trainable())

    def exemplar_pathway(self) -> dict[str, Tensor]:
        """Parameters duplicated by the momentum encoder."""
        out = {f"backbone/{n}": t for n, t in self.backbone.named().items()}
        out.update({f"embedder/{n}": t for n, t in self.embedder.named().items()})
        return out

    # -- inference ------------------------------------------------------------
    def embed_exemplars(self, crops) -> Tensor:
        return embed_crops(crops, self.backbone, self.embedder)

    def detect(self, image: np.ndarray, exemplar_crops: np.ndarray, aggregation: str = "feature_average",
               class_ids: Sequence[int] | None = None, exemplars: Tensor | None = None,
               randomize: np.random.Generator | None = None) -> list[Detection]:
        """Detect the episode classes in one ``(3, H, W)`` image.

        ``exemplar_crops`` is ``(m, n, 3, S, S)``; pass precomputed
        class-major ``exemplars`` of shape ``(m * n, D)`` to skip embedding.
        ``randomize`` replaces the classifier's scores with random draws,
        giving a localisation-only baseline.
        """
        if aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation '{aggregation}'")
        m, n = exemplar_crops.shape[:2]
        if m < 1 or n < 1:
            raise ValueError(f"need at least one class and one shot, got {m}x{n}")
        class_ids = list(range(m)) if class_ids is None else list(class_ids)
        with T.no_grad():
            if exemplars is None:
                exemplars = self.embed_exemplars(exemplar_crops.reshape((m * n,) + exemplar_crops.shape[2:]))
            fmap = backbone_forward(image[None], self.backbone)
            logits, deltas = rpn_forward(fmap, self.rpn, self.rpn_variant, exemplars)
            proposals, _ = rpn_propose(logits.data, deltas.data, RPN_TOP_K_TEST)
            if len(proposals) == 0:
                return []
            feats = roi_pool(fmap, proposals)
            if aggregation == "feature_average":
                protos, shots = average_shot_matrix(exemplars, m, n), 1
            else:
                protos, shots = exemplars, n
            cls_logits, _, box_deltas, _ = box_head_forward(feats, protos, m, shots, self.head, self.comparator)
            scores, background = self._class_scores(cls_logits)
        if randomize is not None:
            r = len(proposals)
            if background is None:
                scores = randomize.random((r, m))
            else:
                draw = randomize.dirichlet(np.ones(m + 1), size=r)
                background, scores = draw[:, 0], draw[:, 1:]
        return assemble(proposals, box_deltas.data, scores, background, class_ids)

    def _class_scores(self, logits: ClassLogits) -> tuple[np.ndarray, np.ndarray | None]:
        if self.comparator.objective == "sigmoid":
            return sigmoid_objective_scores(logits).data.mean(axis=2), None
        post = posterior_nshot(logits).data
        return post[:, 1:], post[:, 0]
