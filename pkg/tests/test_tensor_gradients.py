import numpy as np
import pytest

import gradcheck as G
from cosrcnn import tensor as T
from cosrcnn.comparator import ComparatorParams, class_logits, joint_logits, posterior_nshot
from cosrcnn.detector import roi_pool
from cosrcnn.sumoco import SuMoCoQueue, sumoco_loss
from cosrcnn.tensor import Tensor


@pytest.mark.parametrize("op", sorted(G.OPS))
def test_op_matches_central_differences(op):
    assert G.run_op(op) <= G.TOLERANCE


class TestCheckerItself:
    def test_detects_a_wrong_gradient(self, rng):
        def bad(x):
            return T._result(x.data ** 2, (x,), lambda g: (g * x.data,), "bad_square")
        assert G.check(bad, [rng.normal(size=(3,))], rng) > 0.1

    def test_agrees_on_exact_quadratic(self, rng):
        assert G.check(lambda x: x * x, [rng.normal(size=(4, 2))], rng) < 1e-8


def _comparator(rng, mode, dim):
    p = ComparatorParams.init(rng, dim, mode)
    p.gamma.data = np.array(rng.uniform(0.5, 3.0))
    p.beta.data = np.array(rng.normal())
    return p


@pytest.mark.parametrize("mode", ["cosine", "cosine_scale_only", "cosine_no_affine", "l2"])
def test_comparator_posterior_gradients(mode):
    rng = np.random.default_rng(7)
    for _ in range(20):
        r, m, n, d = 3, int(rng.integers(1, 4)), int(rng.integers(1, 4)), 4
        p = _comparator(rng, mode, d)

        def fn(x, w, wbg, gamma, beta):
            q = ComparatorParams(gamma, beta, wbg, p.bg_bias, mode)
            return posterior_nshot(class_logits(x, w, m, n, q))
        inputs = [rng.normal(size=(r, d)), rng.normal(size=(m * n, d)), rng.normal(size=d) * 0.3,
                  p.gamma.data.copy(), p.beta.data.copy()]
        assert G.check(fn, inputs, rng) <= G.TOLERANCE


def test_sumoco_loss_gradient():
    rng = np.random.default_rng(11)
    for _ in range(20):
        r, m, d = 4, int(rng.integers(1, 4)), 4
        classes = list(rng.choice(10, size=m, replace=False))
        queue = SuMoCoQueue(6, d)
        queue.enqueue(rng.normal(size=(5, d)), list(rng.choice(classes + [99], size=5)))
        targets = rng.integers(0, m + 1, size=r)
        p = _comparator(rng, "cosine", d)

        def fn(x, w):
            return sumoco_loss([(x, targets)], w, classes, queue, p).loss
        assert G.check(fn, [rng.normal(size=(r, d)), rng.normal(size=(m, d))], rng) <= G.TOLERANCE


def test_roi_pool_gradient(rng):
    rois = np.array([[3.0, 5.0, 40.0, 30.0], [0.0, 0.0, 64.0, 64.0], [20.0, 20.0, 29.0, 27.0]])
    fn = lambda f: roi_pool(f, rois)  # noqa: E731
    assert G.check(fn, [rng.normal(size=(1, 2, 8, 8))], rng) <= G.TOLERANCE


def test_joint_logits_gradient_through_logsumexp(rng):
    def fn(e, b):
        from cosrcnn.comparator import ClassLogits
        return joint_logits(ClassLogits(e, b))
    assert G.check(fn, [rng.normal(size=(2, 3, 2)), rng.normal(size=(2,))], rng) <= G.TOLERANCE
