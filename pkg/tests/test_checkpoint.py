import struct

import numpy as np
import pytest

from cosrcnn import checkpoint
from cosrcnn.checkpoint import Checkpoint, CheckpointError, decode_records, encode_records
from cosrcnn.detector import CosRCNN
from cosrcnn.episodes import crop_exemplar, generate_image
from cosrcnn.training import Trainer
from tiny import tiny_config

SUMOCO = {"sumoco.enabled": True, "sumoco.queue_size": 5, "sumoco.alpha": 0.9}


@pytest.fixture(scope="module")
def trained():
    tr = Trainer.create(tiny_config(**SUMOCO))
    tr.run()
    return tr


def detections(model):
    img = generate_image(5, 3)
    crops = np.stack([crop_exemplar(generate_image(5, k), generate_image(5, k).objects[0].box)
                      for k in range(2)])[:, None]
    return [(d.class_id, d.score, d.box.tobytes()) for d in model.detect(img.pixels, crops)]


class TestRecords:
    def test_round_trip_keeps_shapes_and_bits(self, rng):
        rec = {"a": rng.normal(size=(2, 3)), "b": np.array(3.5), "c": np.zeros((0, 4)), "é": np.ones(1)}
        back = decode_records(encode_records(rec))
        assert list(back) == list(rec)
        for k in rec:
            assert back[k].shape == rec[k].shape
            assert back[k].tobytes() == np.asarray(rec[k], dtype=np.float64).tobytes()

    def test_layout(self):
        blob = encode_records({"xy": np.array([[1.0, 2.0]])})
        assert blob[:5] == b"CRCN\x01"
        assert blob[5:] == (struct.pack("<I", 2) + b"xy" + struct.pack("<III", 2, 1, 2)
                            + struct.pack("<dd", 1.0, 2.0))

    def test_truncated(self):
        blob = encode_records({"w": np.arange(6.0)})
        for cut in (3, 7, 12, len(blob) - 1):
            with pytest.raises(CheckpointError, match="truncated"):
                decode_records(blob[:cut])

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            decode_records(b"NOPE\x01")

    def test_version_mismatch_names_both(self):
        with pytest.raises(CheckpointError, match=r"version 7.*version 1"):
            decode_records(b"CRCN\x07")

    def test_duplicate(self):
        one = encode_records({"w": np.ones(1)})
        with pytest.raises(CheckpointError, match="duplicate"):
            decode_records(one + one[5:])


class TestModelState:
    def test_forward_is_bitwise_after_round_trip(self, trained, tmp_path):
        checkpoint.save(tmp_path / "m.ckpt", trained.checkpoint())
        ck = checkpoint.load(tmp_path / "m.ckpt")
        assert checkpoint.model_checksum(ck.model) == checkpoint.model_checksum(trained.model)
        assert detections(ck.model) == detections(trained.model)
        assert ck.config == trained.config and ck.iteration == 4
        assert len(ck.queue) == 5 and set(ck.key_params) == set(trained.sumoco.pair.key)

    def test_unknown_entry(self, trained):
        rec = checkpoint.to_records(trained.checkpoint())
        rec["param/head/extra"] = np.zeros(2)
        with pytest.raises(CheckpointError, match="unexpected.*head/extra"):
            checkpoint.from_records(rec)

    def test_missing_parameter(self, trained):
        rec = checkpoint.to_records(trained.checkpoint())
        del rec["param/rpn/conv_w"]
        with pytest.raises(CheckpointError, match="lacks parameter 'rpn/conv_w'"):
            checkpoint.from_records(rec)

    def test_shape_mismatch(self, trained):
        rec = checkpoint.to_records(trained.checkpoint())
        rec["param/head/delta_b"] = np.zeros(5)
        with pytest.raises(CheckpointError, match="config expects"):
            checkpoint.from_records(rec)

    def test_missing_config(self):
        with pytest.raises(CheckpointError, match="meta/config"):
            checkpoint.from_records({"meta/iteration": np.array(0.0)})

    def test_save_is_atomic(self, trained, tmp_path):
        p = tmp_path / "a.ckpt"
        checkpoint.save(p, trained.checkpoint())
        assert [q.name for q in tmp_path.iterdir()] == ["a.ckpt"]

    def test_fixed_seed_gives_identical_bytes(self, tmp_path):
        for name in ("x", "y"):
            tr = Trainer.create(tiny_config(iterations=2))
            tr.run()
            checkpoint.save(tmp_path / name, tr.checkpoint())
        assert (tmp_path / "x").read_bytes() == (tmp_path / "y").read_bytes()

    @pytest.mark.parametrize("overrides", [{}, SUMOCO])
    def test_resume_is_bitwise(self, overrides, tmp_path):
        straight = Trainer.create(tiny_config(**overrides))
        straight.run()
        half = Trainer.create(tiny_config(**overrides))
        half.run(2)
        checkpoint.save(tmp_path / "half.ckpt", half.checkpoint())
        resumed = Trainer.resume(checkpoint.load(tmp_path / "half.ckpt"))
        resumed.run(2)
        assert resumed.iteration == 4
        assert checkpoint.model_checksum(resumed.model) == checkpoint.model_checksum(straight.model)

    def test_fresh_checkpoint_is_initialisation(self):
        tr = Trainer.create(tiny_config(seed=3))
        ck = checkpoint.from_records(checkpoint.to_records(tr.checkpoint()))
        assert checkpoint.model_checksum(ck.model) == checkpoint.model_checksum(CosRCNN.init(3))
        assert ck.velocity == {}
