"""Procedural shapes images and m-way n-shot episode sampling.

Each image is a pure function of ``(dataset_seed, index, classes)`` so that
episode files can refer to images by reference instead of embedding pixels.
Shape class is carried by geometry alone; colour, size, rotation and the
background level are nuisance variables.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import boxes as box_ops

IMAGE_SIZE = 64
EXEMPLAR_SIZE = 32
SHAPE_NAMES = ("circle", "square", "triangle", "cross", "star",
               "ring", "diamond", "bar", "l_shape", "t_shape")
NUM_CLASSES = len(SHAPE_NAMES)
BASE_CLASSES = (0, 1, 2, 3, 4, 5)
NOVEL_CLASSES = (6, 7, 8, 9)

MIN_HALF, MAX_HALF = 7.0, 15.0
MAX_ROTATION = np.deg2rad(20.0)
MAX_ASPECT = 1.33  # per-object anisotropic stretch, drawn log-uniformly in [1/MAX_ASPECT, MAX_ASPECT]
MAX_GT_IOU = 0.3
FG_THRESHOLD = 0.45  # max-channel level separating shapes from background


@dataclass(frozen=True)
class ClassSplit:
    base: tuple[int, ...] = BASE_CLASSES
    novel: tuple[int, ...] = NOVEL_CLASSES

    def __post_init__(self):
        if set(self.base) & set(self.novel):
            raise ValueError(f"base and novel classes overlap: {set(self.base) & set(self.novel)}")

    def classes(self, name: str) -> tuple[int, ...]:
        if name == "base":
            return self.base
        if name == "novel":
            return self.novel
        raise ValueError(f"unknown split '{name}' (expected 'base' or 'novel')")


@dataclass
class ShapeObject:
    shape_class: int
    box: np.ndarray
    color: np.ndarray
    rotation: float


@dataclass
class ShapesImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    objects: list[ShapeObject]
    seed: int
    index: int

    @property
    def boxes(self) -> np.ndarray:
        return box_ops.as_boxes([o.box for o in self.objects])

    @property
    def labels(self) -> np.ndarray:
        return np.array([o.shape_class for o in self.objects], dtype=np.int64)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def _shape_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership test in the unit frame ``u, v in [-1, 1]`` (v points down)."""
    au, av = np.abs(u), np.abs(v)
    r = np.hypot(u, v)
    name = SHAPE_NAMES[cls]
    if name == "circle":
        return r <= 0.95
    if name == "square":
        return (au <= 0.8) & (av <= 0.8)
    if name == "triangle":
        return (v >= -0.9) & (v <= 0.85) & (au <= 0.5 * (v + 0.9))
    if name == "cross":
        return ((au <= 0.28) & (av <= 0.95)) | ((av <= 0.28) & (au <= 0.95))
    if name == "star":
        theta = np.arctan2(v, u)
        return r <= 0.58 + 0.37 * np.cos(5 * theta + np.pi / 2)
    if name == "ring":
        return (r <= 0.95) & (r >= 0.55)
    if name == "diamond":
        return au / 0.65 + av <= 0.95
    if name == "bar":
        return (au <= 0.95) & (av <= 0.4)
    if name == "l_shape":
        return (((u >= -0.9) & (u <= -0.3) & (av <= 0.9))
                | ((au <= 0.9) & (v >= 0.3) & (v <= 0.9)))
    if name == "t_shape":
        return (((v >= -0.9) & (v <= -0.3) & (au <= 0.9))
                | ((au <= 0.3) & (av <= 0.9)))
    raise ValueError(f"unknown shape class {cls}")


def render_mask(cls: int, center, half: float, rotation: float, size: int = IMAGE_SIZE,
                aspect: float = 1.0) -> np.ndarray:
    """Boolean ``(size, size)`` mask sampled at pixel centres.

    The unit shape is stretched to half-extents ``(half * aspect, half / aspect)``
    before rotation.
    """
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - center[0], ys - center[1]
    c, s = np.cos(rotation), np.sin(rotation)
    u = (c * dx + s * dy) / (half * aspect)
    v = (-s * dx + c * dy) / (half / aspect)
    return _shape_mask(cls, u, v)


def mask_box(mask: np.ndarray) -> np.ndarray:
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)


def _slot_classes(seed: int, index: int, classes: Sequence[int], slots: int) -> list[int]:
    # Block-permuted assignment: within each block of len(classes) images every
    # class appears exactly once per object slot, which keeps the histogram flat.
    k = len(classes)
    block, pos = divmod(index, k)
    out = []
    for j in range(slots):
        perm = np.random.default_rng([seed, block, j, 7919]).permutation(k)
        out.append(int(classes[perm[pos]]))
    return out


def generate_image(seed: int, index: int, classes: Sequence[int] | None = None,
                   size: int = IMAGE_SIZE) -> ShapesImage:
    classes = tuple(range(NUM_CLASSES)) if classes is None else tuple(classes)
    rng = np.random.default_rng([seed, index])
    n_objects = int(rng.integers(1, 5))
    wanted = _slot_classes(seed, index, classes, n_objects)

    bg_level = rng.uniform(0.0, 0.25)
    pixels = bg_level + rng.normal(0.0, 0.03, size=(3, size, size))
    pixels = np.clip(pixels, 0.0, 0.35)
    occupied = np.zeros((size, size), dtype=bool)
    objects: list[ShapeObject] = []
    for cls in wanted:
        for _ in range(50):
            half = rng.uniform(MIN_HALF, MAX_HALF)
            rot = rng.uniform(-MAX_ROTATION, MAX_ROTATION)
            aspect = float(np.exp(rng.uniform(-np.log(MAX_ASPECT), np.log(MAX_ASPECT))))
            reach = half * MAX_ASPECT
            center = rng.uniform(reach, size - reach, size=2)
            mask = render_mask(cls, center, half, rot, size, aspect)
            if mask.sum() < 12:
                continue
            box = mask_box(mask)
            if objects and box_ops.iou_matrix(box, [o.box for o in objects]).max() > MAX_GT_IOU:
                continue
            grown = mask.copy()
            grown[1:] |= mask[:-1]
            grown[:-1] |= mask[1:]
            grown[:, 1:] |= grown[:, :-1]
            grown[:, :-1] |= grown[:, 1:]
            if np.any(grown & occupied):
                continue
            color = rng.uniform(0.2, 1.0, size=3)
            color[rng.integers(3)] = rng.uniform(0.75, 1.0)
            shade = color[:, None] * (1.0 - 0.1 * rng.random(int(mask.sum())))[None, :]
            pixels[:, mask] = np.clip(shade, FG_THRESHOLD + 0.05, 1.0)
            occupied |= mask
            objects.append(ShapeObject(cls, box, color, float(rot)))
            break
    if not objects:
        # Unreachable for the configured size range; kept as a hard guard.
        raise RuntimeError(f"failed to place any object in image {index} of seed {seed}")
    return ShapesImage(pixels=pixels, objects=objects, seed=seed, index=index)


def generate_dataset(seed: int, num_images: int, classes: Sequence[int] | None = None) -> list[ShapesImage]:
    """Deterministic list of shapes images; ``classes`` restricts the class pool."""
    if num_images < 1:
        raise ValueError(f"num_images must be >= 1, got {num_images}")
    return [generate_image(seed, i, classes) for i in range(num_images)]


# ---------------------------------------------------------------------------
# cropping and augmentation
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of a ``(C, H, W)`` array."""
    _, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - wx) + img[:, y0][:, :, x1] * wx
    bot = img[:, y1][:, :, x0] * (1 - wx) + img[:, y1][:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def crop_exemplar(image: ShapesImage | np.ndarray, box, size: int = EXEMPLAR_SIZE) -> np.ndarray:
    """Crop exactly at ``box`` (no context) and resize to ``size x size``."""
    pixels = image.pixels if isinstance(image, ShapesImage) else image
    x1, y1, x2, y2 = (int(round(c)) for c in np.asarray(box, dtype=np.float64))
    _, h, w = pixels.shape
    x1, y1, x2, y2 = max(x1, 0), max(y1, 0), min(x2, w), min(y2, h)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"degenerate exemplar box {list(box)}")
    return resize_bilinear(pixels[:, y1:y2, x1:x2], size, size)


def hflip_image(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, :, ::-1].copy()


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------

@dataclass
class ImageRef:
    dataset_seed: int
    index: int

    def to_json(self) -> dict:
        return {"dataset_seed": self.dataset_seed, "index": self.index}


@dataclass
class ExemplarRef:
    shape_class: int
    image: ImageRef
    box: list[float]

    def to_json(self) -> dict:
        return {"class": self.shape_class, "image": self.image.to_json(), "box": list(self.box)}


@dataclass
class Episode:
    """One m-way n-shot task.

    ``classes`` fixes the episode's class order: class ``classes[i]`` is the
    ``i``-th comparison slot. ``exemplars`` holds ``shot`` refs per class in
    that order. For training episodes the pixels are materialised in
    ``query_pixels``/``exemplar_crops``; evaluation episodes are resolved
    lazily from a dataset.
    """

    episode_seed: int
    way: int
    shot: int
    classes: list[int]
    query: list[ImageRef]
    exemplars: list[ExemplarRef]
    query_pixels: list[np.ndarray] = field(default_factory=list, repr=False)
    query_boxes: list[np.ndarray] = field(default_factory=list, repr=False)
    query_labels: list[np.ndarray] = field(default_factory=list, repr=False)
    exemplar_crops: np.ndarray | None = field(default=None, repr=False)

    def exemplars_by_class(self) -> list[list[ExemplarRef]]:
        groups = {c: [] for c in self.classes}
        for ex in self.exemplars:
            groups[ex.shape_class].append(ex)
        return [groups[c] for c in self.classes]

    def to_json(self) -> dict:
        return {
            "episode_seed": self.episode_seed,
            "way": self.way,
            "shot": self.shot,
            "classes": list(self.classes),
            "query": [q.to_json() for q in self.query],
            "exemplars": [e.to_json() for e in self.exemplars],
        }

    @classmethod
    def from_json(cls, d: dict) -> Episode:
        return cls(
            episode_seed=int(d["episode_seed"]),
            way=int(d["way"]),
            shot=int(d["shot"]),
            classes=[int(c) for c in d["classes"]],
            query=[ImageRef(int(q["dataset_seed"]), int(q["index"])) for q in d["query"]],
            exemplars=[ExemplarRef(int(e["class"]), ImageRef(int(e["image"]["dataset_seed"]),
                                                              int(e["image"]["index"])),
                                   [float(x) for x in e["box"]]) for e in d["exemplars"]],
        )


class InstanceIndex:
    """Lookup from class id to ``(image position, object position)`` pairs."""

    def __init__(self, dataset: Sequence[ShapesImage]):
        self.dataset = dataset
        self.by_class: dict[int, list[tuple[int, int]]] = {}
        self.images_with: dict[int, list[int]] = {}
        for i, img in enumerate(dataset):
            for j, obj in enumerate(img.objects):
                self.by_class.setdefault(obj.shape_class, []).append((i, j))
            for c in set(int(o.shape_class) for o in img.objects):
                self.images_with.setdefault(c, []).append(i)


def _flip(pixels, boxes_, rng, prob):
    if rng.random() < prob:
        return hflip_image(pixels), box_ops.hflip_boxes(boxes_, pixels.shape[2]), True
    return pixels, boxes_, False


def sample_training_episode(dataset: Sequence[ShapesImage], split: ClassSplit,
                            rng: np.random.Generator, way: int = 5, shot: int = 1,
                            flip_prob: float = 0.5, index: InstanceIndex | None = None,
                            image_id: int | None = None) -> Episode:
    """One query image plus ``way * shot`` exemplar crops from other images.

    The episode's classes include every class present in the query image;
    the rest are drawn from the remaining base classes. Query and exemplars
    are flipped horizontally and independently with probability ``flip_prob``.
    """
    base = set(split.base)
    if len(base) < way:
        raise ValueError(f"{way}-way training needs at least {way} base classes, have {len(base)}")
    index = index or InstanceIndex(dataset)
    candidates = [i for i, img in enumerate(dataset)
                  if img.objects and all(o.shape_class in base for o in img.objects)]
    if not candidates:
        raise ValueError("no image contains only base-class objects")
    qi = int(candidates[rng.integers(len(candidates))]) if image_id is None else image_id
    query = dataset[qi]
    present = sorted(set(int(c) for c in query.labels))
    if not set(present) <= base:
        raise ValueError(f"query image {qi} contains non-base classes {present}")
    if len(present) > way:
        raise ValueError(f"query image has {len(present)} classes but way is {way}")
    others = sorted(base - set(present))
    extra = [int(c) for c in rng.choice(others, size=way - len(present), replace=False)] if way > len(present) else []
    classes = [int(c) for c in rng.permutation(present + extra)]

    exemplars, crops = [], []
    for c in classes:
        pool = [(i, j) for (i, j) in index.by_class[c] if i != qi]
        picks = rng.choice(len(pool), size=shot, replace=len(pool) < shot)
        for p in picks:
            i, j = pool[int(p)]
            img = dataset[i]
            box = img.objects[j].box
            crop = crop_exemplar(img, box)
            if rng.random() < flip_prob:
                crop = hflip_image(crop)
            exemplars.append(ExemplarRef(c, ImageRef(img.seed, img.index), box.tolist()))
            crops.append(crop)

    pixels, gt, _ = _flip(query.pixels, query.boxes, rng, flip_prob)
    slot = {c: k for k, c in enumerate(classes)}
    labels = np.array([slot[int(c)] for c in query.labels], dtype=np.int64)
    return Episode(
        episode_seed=int(rng.integers(2**31)), way=way, shot=shot, classes=classes,
        query=[ImageRef(query.seed, query.index)], exemplars=exemplars,
        query_pixels=[pixels], query_boxes=[gt], query_labels=[labels],
        exemplar_crops=np.stack(crops),
    )


def sample_eval_episodes(dataset: Sequence[ShapesImage], split: ClassSplit | str,
                         num_episodes: int, way: int, shot: int, rng: np.random.Generator,
                         queries_per_class: int = 2, split_name: str | None = None) -> list[Episode]:
    """Fixed evaluation episodes; exemplars never come from the episode's query images."""
    if isinstance(split, str):
        split_name, split = split, ClassSplit()
    pool = split.classes(split_name or "novel")
    if way > len(pool):
        raise ValueError(f"{way}-way episodes need {way} classes, split has {len(pool)}")
    index = InstanceIndex(dataset)
    episodes = []
    for _ in range(num_episodes):
        ep_seed = int(rng.integers(2**31))
        erng = np.random.default_rng(ep_seed)
        classes = sorted(int(c) for c in erng.choice(pool, size=way, replace=False))
        query_ids: list[int] = []
        for c in classes:
            avail = [i for i in index.images_with.get(c, []) if i not in query_ids]
            if len(avail) < queries_per_class:
                raise ValueError(f"not enough images of class {c} for {queries_per_class} queries")
            query_ids.extend(int(i) for i in erng.choice(avail, size=queries_per_class, replace=False))
        taken = set(query_ids)
        exemplars = []
        for c in classes:
            cands = [(i, j) for (i, j) in index.by_class[c] if i not in taken]
            if len(cands) < shot:
                raise ValueError(f"not enough disjoint exemplars of class {c} for {shot} shots")
            for p in erng.choice(len(cands), size=shot, replace=False):
                i, j = cands[int(p)]
                img = dataset[i]
                exemplars.append(ExemplarRef(c, ImageRef(img.seed, img.index), img.objects[j].box.tolist()))
        episodes.append(Episode(
            episode_seed=ep_seed, way=way, shot=shot, classes=classes,
            query=[ImageRef(dataset[i].seed, dataset[i].index) for i in query_ids],
            exemplars=exemplars,
        ))
    return episodes


@dataclass
class EpisodeFile:
    """Serialised evaluation episodes plus the dataset descriptor they refer to."""

    dataset_seed: int
    num_images: int
    classes: list[int]
    split: str
    episodes: list[Episode]

    def dataset(self) -> list[ShapesImage]:
        return generate_dataset(self.dataset_seed, self.num_images, self.classes)

    def to_json(self) -> dict:
        return {
            "dataset": {"seed": self.dataset_seed, "num_images": self.num_images,
                        "classes": list(self.classes), "split": self.split},
            "episodes": [e.to_json() for e in self.episodes],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_json(cls, d: dict) -> EpisodeFile:
        ds = d["dataset"]
        return cls(int(ds["seed"]), int(ds["num_images"]), [int(c) for c in ds["classes"]],
                   str(ds["split"]), [Episode.from_json(e) for e in d["episodes"]])

    @classmethod
    def load(cls, path) -> EpisodeFile:
        return cls.from_json(json.loads(Path(path).read_text()))


def make_episode_file(dataset_seed: int, num_images: int, split: str, way: int, shot: int,
                      count: int, seed: int, queries_per_class: int = 2) -> EpisodeFile:
    pool = list(ClassSplit().classes(split))
    data = generate_dataset(dataset_seed, num_images, pool)
    eps = sample_eval_episodes(data, split, count, way, shot, np.random.default_rng(seed),
                               queries_per_class=queries_per_class)
    return EpisodeFile(dataset_seed, num_images, pool, split, eps)


def resolve_episode(ep: Episode, dataset: Sequence[ShapesImage], shot: int | None = None):
    """Materialise query pixels/GT and exemplar crops of an evaluation episode.

    Returns ``(queries, crops)``: ``queries`` is a list of ``(pixels, boxes,
    labels)`` with labels as episode slots and non-episode objects dropped;
    ``crops`` has shape ``(way, shot, 3, S, S)``.
    """
    shot = ep.shot if shot is None else shot
    if not 1 <= shot <= ep.shot:
        raise ValueError(f"requested {shot} shots but the episode has {ep.shot}")
    by_pos = {(img.seed, img.index): img for img in dataset}
    slot = {c: k for k, c in enumerate(ep.classes)}
    queries = []
    for ref in ep.query:
        img = by_pos[(ref.dataset_seed, ref.index)]
        keep = [k for k, o in enumerate(img.objects) if o.shape_class in slot]
        boxes_ = img.boxes[keep] if keep else np.zeros((0, 4))
        labels = np.array([slot[img.objects[k].shape_class] for k in keep], dtype=np.int64)
        queries.append((img.pixels, boxes_, labels))
    crops = []
    for group in ep.exemplars_by_class():
        if len(group) < shot:
            raise ValueError(f"episode {ep.episode_seed} has ragged shot counts")
        crops.append(np.stack([crop_exemplar(by_pos[(e.image.dataset_seed, e.image.index)], e.box)
                               for e in group[:shot]]))
    return queries, np.stack(crops)
