"""Episodic evaluation of a trained model; never mutates parameters."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .detector import CosRCNN
from .episodes import EpisodeFile, ShapesImage, resolve_episode
from .metrics import APAccumulator


def evaluate(model: CosRCNN, episodes: EpisodeFile, shot: int | None = None,
             aggregation: str = "feature_average", dataset: list[ShapesImage] | None = None,
             random_scores_seed: int | None = None) -> dict:
    """AP50 report over all episodes, pooling detections per class.

    With ``random_scores_seed`` the classifier scores are replaced by random
    draws (the localisation-only baseline).
    """
    dataset = episodes.dataset() if dataset is None else dataset
    rng = None if random_scores_seed is None else np.random.default_rng(random_scores_seed)
    acc = APAccumulator()
    used_shot = None
    before = dict(T.stats)
    with T.no_grad():
        for ep in episodes.episodes:
            queries, crops = resolve_episode(ep, dataset, shot)
            used_shot = crops.shape[1]
            m, n = crops.shape[:2]
            exemplars = model.embed_exemplars(crops.reshape((m * n,) + crops.shape[2:]))
            for pixels, gt_boxes, gt_labels in queries:
                dets = model.detect(pixels, crops, aggregation, class_ids=ep.classes,
                                    exemplars=exemplars, randomize=rng)
                acc.add_image([d.box for d in dets], [d.score for d in dets], [d.class_id for d in dets],
                              gt_boxes, np.asarray(ep.classes)[gt_labels] if len(gt_labels) else [],
                              ep.classes)
    if T.stats != before:
        raise RuntimeError("evaluation recorded gradient work")
    per_class, mean, excluded = acc.compute()
    way = episodes.episodes[0].way if episodes.episodes else 0
    return {
        "per_class_ap": {str(c): ap for c, ap in per_class.items()},
        "mean_ap50": mean,
        "num_episodes": len(episodes.episodes),
        "way": way,
        "shot": used_shot,
        "aggregation_mode": aggregation,
        "excluded_classes": excluded,
        "split": episodes.split,
    }
