import json
import time

import numpy as np
import pytest

from cosrcnn import boxes as box_ops
from cosrcnn.checkpoint import model_checksum
from cosrcnn.detector import ANCHORS
from cosrcnn.episodes import Episode
from cosrcnn.training import (RPN_NEG_IOU, RPN_POS_IOU, ROI_BG_IOU, ROI_FG_IOU, Trainer,
                              TrainingDiverged, assign_anchors, compute_losses, dump_episode,
                              sample_rois)
from tiny import tiny_config


class TestAnchorAssignment:
    def test_thresholds(self):
        gt = np.array([[10.0, 10.0, 34.0, 34.0]])
        labels, matched = assign_anchors(ANCHORS, gt)
        iou = box_ops.iou_matrix(ANCHORS, gt)[:, 0]
        assert np.all(labels[iou >= RPN_POS_IOU] == 1)
        assert np.all(labels[(iou < RPN_NEG_IOU) & (iou < iou.max())] == 0)
        ignored = (iou >= RPN_NEG_IOU) & (iou < RPN_POS_IOU) & (iou < iou.max())
        assert np.all(labels[ignored] == -1)
        assert np.all(matched == 0)

    def test_every_object_gets_a_positive(self):
        gt = np.array([[0.0, 0.0, 3.0, 3.0], [40.0, 40.0, 60.0, 44.0]])
        labels, matched = assign_anchors(ANCHORS, gt)
        for g in range(2):
            best = int(np.argmax(box_ops.iou_matrix(ANCHORS, gt)[:, g]))
            assert labels[best] == 1 and matched[best] == g

    def test_no_objects(self):
        labels, _ = assign_anchors(ANCHORS, np.zeros((0, 4)))
        assert np.all(labels == 0)


class TestRoISampling:
    def test_targets_and_bands(self, rng):
        gt = np.array([[5.0, 5.0, 25.0, 25.0], [30.0, 30.0, 60.0, 60.0]])
        props = np.concatenate([gt + rng.normal(0, 2, size=(2, 4)) for _ in range(10)]
                               + [rng.uniform(0, 30, size=(40, 2)) @ [[1, 0, 1, 0], [0, 1, 0, 1]]
                                  + [0, 0, 4, 4]])
        rois, targets, match = sample_rois(props, gt, np.array([2, 0]), rng)
        assert len(rois) <= 16 and np.count_nonzero(targets) <= 4
        best = box_ops.iou_matrix(rois, gt).max(axis=1)
        assert np.all(best[targets > 0] >= ROI_FG_IOU)
        assert np.all(best[targets == 0] < ROI_BG_IOU)
        np.testing.assert_array_equal(targets[targets > 0], np.array([3, 1])[match[targets > 0]])

    def test_gt_boxes_are_candidates(self, rng):
        gt = np.array([[5.0, 5.0, 25.0, 25.0]])
        rois, targets, _ = sample_rois(np.array([[40.0, 40, 50, 50]]), gt, np.array([0]), rng)
        assert targets.tolist() == [1, 0]
        np.testing.assert_array_equal(rois[0], gt[0])


class TestTrainer:
    def test_exemplar_and_query_share_the_backbone(self):
        tr = Trainer.create(tiny_config())
        path = tr.model.exemplar_pathway()
        for name, t in tr.model.backbone.named().items():
            assert path[f"backbone/{name}"] is t

    def test_deterministic(self):
        a, b = Trainer.create(tiny_config()), Trainer.create(tiny_config())
        assert a.run() == b.run()
        assert model_checksum(a.model) == model_checksum(b.model)
        assert a.iteration == 4

    def test_different_seeds_differ(self):
        a, b = Trainer.create(tiny_config()), Trainer.create(tiny_config(seed=1))
        a.run(1)
        b.run(1)
        assert model_checksum(a.model) != model_checksum(b.model)

    def test_step_record(self):
        tr = Trainer.create(tiny_config(episodes_per_iteration=2))
        rec = tr.step()
        assert rec["iteration"] == 1 and rec["lr"] == pytest.approx(0.005)
        parts = sum(v for k, v in rec.items() if k not in ("iteration", "lr", "loss"))
        assert rec["loss"] == pytest.approx(parts)

    def test_batched_step_averages_gradients(self):
        tr = Trainer.create(tiny_config())
        eps = [tr.sample_episode() for _ in range(2)]
        grads = []
        for ep in eps:
            tr.optimizer.zero_grad()
            compute_losses(tr.model, ep, np.random.default_rng(0)).total.backward()
            grads.append(tr.model.head.fc1_w.grad.copy())
        tr.optimizer.zero_grad()
        for ep in eps:
            (compute_losses(tr.model, ep, np.random.default_rng(0)).total * 0.5).backward()
        np.testing.assert_allclose(tr.model.head.fc1_w.grad, 0.5 * (grads[0] + grads[1]), atol=1e-12)

    def test_overfits_single_episode(self):
        tr = Trainer.create(tiny_config(**{"schedule.decay_steps": [], "schedule.warmup_steps": 10}))
        ep = tr.sample_episode()
        start = time.perf_counter()
        losses = [tr.step(ep)["loss"] for _ in range(300)]
        assert time.perf_counter() - start < 120
        first, last = np.mean(losses[:10]), np.mean(losses[-10:])
        assert last <= 0.5 * first, (first, last)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_reports_episode(self, tmp_path):
        tr = Trainer.create(tiny_config())
        tr.model.head.fc1_w.data[0, 0] = np.inf
        with pytest.raises(TrainingDiverged) as info:
            tr.step()
        exc = info.value
        assert exc.iteration == 0 and str(exc.episode_seed) in str(exc)
        dump_episode(tmp_path / "ep.json", exc.episode)
        back = Episode.from_json(json.loads((tmp_path / "ep.json").read_text()))
        assert back.to_json() == exc.episode.to_json()

    def test_history_logged(self, monkeypatch):
        import cosrcnn.training as training
        monkeypatch.setattr(training, "LOG_EVERY", 2)
        tr = Trainer.create(tiny_config())
        hist = tr.run()
        assert [h["iteration"] for h in hist] == [2, 4]
        assert all(np.isfinite(h["loss"]) for h in hist)

    def test_checkpoint_callback(self):
        tr = Trainer.create(tiny_config())
        seen = []
        tr.run(on_checkpoint=lambda t: seen.append(t.iteration), checkpoint_every=2)
        assert seen == [2, 4]
