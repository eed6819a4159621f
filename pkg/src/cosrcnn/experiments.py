"""Cached training runs and ablation sweeps over a base configuration."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import checkpoint
from .config import RunConfig
from .detector import CosRCNN
from .episodes import EpisodeFile, make_episode_file
from .evaluate import evaluate
from .training import Trainer

log = logging.getLogger(__name__)

SUMOCO_GRID = ((0.0, 0), (0.9, 10), (0.99, 10), (0.99, 100), (0.999, 100))

AXES: dict[str, list[tuple[str, dict]]] = {
    "cosine_form": [
        ("no_affine", {"comparator.mode": "cosine_no_affine"}),
        ("scale", {"comparator.mode": "cosine_scale_only"}),
        ("scale_bias", {"comparator.mode": "cosine"}),
    ],
    "objective": [
        ("softmax", {"comparator.objective": "softmax"}),
        ("sigmoid", {"comparator.objective": "sigmoid", "sumoco.enabled": False}),
    ],
    "metric": [
        ("cosine", {"comparator.mode": "cosine"}),
        ("l2", {"comparator.mode": "l2"}),
    ],
    "rpn": [
        ("standard", {"rpn_variant": "standard"}),
        ("cos_linear", {"rpn_variant": "cos_linear"}),
    ],
    "sumoco": [
        (f"alpha={a:g},q={q}", {"sumoco.enabled": True, "sumoco.alpha": a, "sumoco.queue_size": q})
        for a, q in SUMOCO_GRID
    ],
}


def source_digest() -> str:
    """Hash of the package sources, so cached models go stale when code changes."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def run_key(config: RunConfig) -> str:
    d = config.to_dict()
    d.pop("output_dir")
    d.pop("eval")
    h = hashlib.sha256(repr(sorted(d.items())).encode())
    h.update(source_digest().encode())
    return h.hexdigest()[:20]


@dataclass
class TrainedRun:
    model: CosRCNN
    train_seconds: float
    cached: bool


def train_run(config: RunConfig, cache_dir=None) -> TrainedRun:
    """Train ``config`` from scratch, reusing a cached checkpoint when one matches.

    The wall time of the original training is kept next to the checkpoint.
    """
    path = Path(cache_dir) / f"{run_key(config)}.ckpt" if cache_dir is not None else None
    meta = path.with_suffix(".json") if path is not None else None
    if path is not None and path.exists() and meta.exists():
        log.info("cached model %s", path)
        return TrainedRun(checkpoint.load(path).model, json.loads(meta.read_text())["train_seconds"], True)
    start = time.perf_counter()
    tr = Trainer.create(config)
    tr.run()
    seconds = time.perf_counter() - start
    if path is not None:
        checkpoint.save(path, tr.checkpoint())
        meta.write_text(json.dumps({"train_seconds": seconds, "config": config.to_dict()}, indent=1))
    return TrainedRun(tr.model, seconds, False)


def train(config: RunConfig, cache_dir=None) -> CosRCNN:
    return train_run(config, cache_dir).model


def eval_files(config: RunConfig) -> dict[str, EpisodeFile]:
    """The fixed novel and base episode files described by ``config.eval``."""
    e = config.eval
    return {split: make_episode_file(e.dataset_seed, e.num_images, split, e.way, e.shot,
                                     e.episodes, e.episode_seed)
            for split in ("novel", "base")}


@dataclass
class VariantResult:
    name: str
    overrides: dict
    ap50: dict[str, dict[int, float]]   # split -> shot -> mean AP50


def ablate(config: RunConfig, axis: str, shots: Sequence[int] = (1, 5), cache_dir=None,
           files: dict[str, EpisodeFile] | None = None,
           trainer: Callable[[RunConfig], CosRCNN] | None = None) -> list[VariantResult]:
    """Train one model per variant of ``axis`` and score all on the same episodes."""
    if axis not in AXES:
        raise ValueError(f"unknown ablation axis '{axis}'; choose from {sorted(AXES)}")
    files = eval_files(config) if files is None else files
    datasets = {split: f.dataset() for split, f in files.items()}
    trainer = trainer or (lambda cfg: train(cfg, cache_dir))
    out = []
    for name, overrides in AXES[axis]:
        cfg = config.replace(**overrides)
        model = trainer(cfg)
        ap = {split: {s: evaluate(model, f, shot=s, aggregation=cfg.aggregation,
                                  dataset=datasets[split])["mean_ap50"] for s in shots}
              for split, f in files.items()}
        out.append(VariantResult(name, overrides, ap))
    return out


def format_table(axis: str, rows: Sequence[VariantResult]) -> str:
    cols = [(split, s) for split in rows[0].ap50 for s in rows[0].ap50[split]]
    head = [axis] + [f"{split} {s}-shot" for split, s in cols]
    lines = [" | ".join(head), " | ".join("---" for _ in head)]
    for r in rows:
        lines.append(" | ".join([r.name] + [f"{r.ap50[split][s]:.3f}" for split, s in cols]))
    return "\n".join(lines)
