import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cosrcnn import boxes as B


def box_strategy():
    return st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(1, 40), st.floats(1, 40)).map(
        lambda t: [t[0], t[1], t[0] + t[2], t[1] + t[3]])


class TestIoU:
    def test_identical(self):
        assert B.iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0

    def test_half_overlap(self):
        # intersection 50, union 150
        assert B.iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_disjoint_and_touching(self):
        assert B.iou([0, 0, 10, 10], [20, 20, 30, 30]) == 0.0
        assert B.iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0

    def test_degenerate_box_gives_zero(self):
        assert B.iou([0, 0, 0, 0], [0, 0, 0, 0]) == 0.0

    @given(box_strategy(), box_strategy())
    def test_symmetric_and_bounded(self, a, b):
        v = B.iou(a, b)
        assert 0.0 <= v <= 1.0 + 1e-12
        assert v == pytest.approx(B.iou(b, a), abs=1e-15)


class TestCoding:
    @given(box_strategy(), box_strategy())
    def test_roundtrip(self, box, anchor):
        for w in ((1.0, 1.0, 1.0, 1.0), (10.0, 10.0, 5.0, 5.0)):
            d = B.encode(box, anchor, w)
            np.testing.assert_allclose(B.decode(d, anchor, w), [box], atol=1e-9, rtol=0)

    def test_zero_delta_is_anchor(self):
        anchor = np.array([[4.0, 6.0, 20.0, 18.0]])
        np.testing.assert_array_equal(B.decode(np.zeros((1, 4)), anchor), anchor)

    def test_decode_clamps_scale(self):
        out = B.decode([[0, 0, 100.0, 100.0]], [[0, 0, 16, 16]])
        assert out[0, 2] - out[0, 0] == pytest.approx(1000.0)


class TestFlipAndClip:
    def test_flip_matches_formula(self):
        np.testing.assert_array_equal(B.hflip_boxes([[3, 1, 10, 5]], 64), [[54, 1, 61, 5]])

    @given(box_strategy())
    def test_flip_is_involution(self, b):
        np.testing.assert_allclose(B.hflip_boxes(B.hflip_boxes(b, 64), 64), [b], atol=1e-12)

    def test_clip(self):
        np.testing.assert_array_equal(B.clip_boxes([[-5, 3, 70, 80]], 64, 64), [[0, 3, 64, 64]])


class TestNMS:
    def test_suppresses_overlaps(self):
        boxes = [[0, 0, 10, 10], [1, 0, 11, 10], [30, 30, 40, 40]]
        np.testing.assert_array_equal(B.nms(boxes, [0.9, 0.8, 0.7], 0.5), [0, 2])

    def test_equal_scores_prefer_lower_index(self):
        boxes = [[0, 0, 10, 10], [0, 0, 10, 10]]
        np.testing.assert_array_equal(B.nms(boxes, [0.5, 0.5], 0.5), [0])
        np.testing.assert_array_equal(B.nms(boxes[::-1], [0.5, 0.5], 0.5), [0])

    def test_threshold_is_strict(self):
        boxes = [[0, 0, 10, 10], [5, 0, 15, 10]]   # IoU exactly 1/3
        assert len(B.nms(boxes, [1.0, 0.9], 1.0 / 3.0)) == 2

    def test_empty(self):
        assert len(B.nms(np.zeros((0, 4)), [], 0.5)) == 0
