import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cosrcnn import tensor as T
from cosrcnn.comparator import (ClassLogits, ComparatorParams, background_logit, class_logits,
                                classification_loss, cosine_similarity, l2_logits, pairwise_logits,
                                posterior_1shot, posterior_nshot, scaled_cosine,
                                sigmoid_objective_scores)
from cosrcnn.tensor import Tensor

D = 5


def params(rng, mode="cosine", objective="softmax", gamma=None, beta=None):
    p = ComparatorParams.init(rng, D, mode, objective)
    p.gamma.data = np.array(rng.uniform(0.5, 8.0) if gamma is None else gamma)
    p.beta.data = np.array(rng.normal() if beta is None else beta)
    p.bg_weights.data = rng.normal(size=D)
    p.bg_bias.data = np.array(rng.normal())
    return p


def logits_for(rng, r, m, n, p):
    x = Tensor(rng.normal(size=(r, D)))
    w = Tensor(rng.normal(size=(m * n, D)))
    return x, w, class_logits(x, w, m, n, p)


class TestScalarForms:
    def test_cosine_value(self):
        assert cosine_similarity(Tensor([1.0, 0.0]), Tensor([1.0, 1.0])).item() == pytest.approx(2 ** -0.5)

    def test_scaled_cosine(self, rng):
        p = params(rng, gamma=3.0, beta=-0.5)
        v = scaled_cosine(Tensor([0.0, 2.0, 0, 0, 0]), Tensor([0.0, 5.0, 0, 0, 0]), p).item()
        assert v == pytest.approx(2.5)

    def test_l2_is_negated_squared_distance(self):
        assert l2_logits(Tensor([1.0, 2.0]), Tensor([4.0, 6.0])).item() == -25.0

    def test_pairwise_matches_scalar(self, rng):
        for mode in ("cosine", "cosine_scale_only", "cosine_no_affine", "l2"):
            p = params(rng, mode)
            x, w = Tensor(rng.normal(size=(3, D))), Tensor(rng.normal(size=(4, D)))
            pw = pairwise_logits(x, w, p).data
            for i, j in itertools.product(range(3), range(4)):
                ref = float(oracles.logit(w.data[j], x.data[i], mode, p.gamma.item(), p.beta.item()))
                assert pw[i, j] == pytest.approx(ref, abs=1e-9)

    def test_background_is_linear(self, rng):
        p = params(rng)
        x = rng.normal(size=D)
        expected = x @ p.bg_weights.data + p.bg_bias.item()
        assert background_logit(Tensor(x), p).item() == pytest.approx(expected, abs=1e-12)
        assert background_logit(Tensor(x[None]), p).shape == (1,)


class TestPosterior:
    def test_normalised_over_1000_draws(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            m, n = int(rng.integers(1, 6)), int(rng.integers(1, 4))
            lg = ClassLogits(Tensor(rng.normal(size=(2, m, n)) * 10), Tensor(rng.normal(size=2) * 10))
            post = posterior_nshot(lg).data
            assert np.all((post >= 0) & (post <= 1))
            np.testing.assert_allclose(post.sum(axis=1), 1.0, rtol=0, atol=1e-9)

    def test_symmetric_case_is_one_half(self):
        lg = ClassLogits(Tensor([[[0.7]]]), Tensor([0.7]))
        np.testing.assert_allclose(posterior_1shot(lg).data, [[0.5, 0.5]], rtol=0, atol=1e-15)

    def test_nshot_reduces_to_1shot_exactly(self, rng):
        for _ in range(200):
            m = int(rng.integers(1, 6))
            lg = ClassLogits(Tensor(rng.normal(size=(3, m, 1)) * 5), Tensor(rng.normal(size=3) * 5))
            a, b = posterior_1shot(lg).data, posterior_nshot(lg).data
            assert a.tobytes() == b.tobytes()
            # and it is the closed-form one-shot posterior
            z = np.concatenate([lg.background.data[:, None], lg.exemplar.data[:, :, 0]], axis=1)
            ref = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
            np.testing.assert_allclose(a, ref, rtol=0, atol=1e-12)

    def test_1shot_rejects_multi_shot(self):
        with pytest.raises(ValueError):
            posterior_1shot(ClassLogits(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros(1))))

    def test_empty_class_set_fails(self):
        with pytest.raises(ValueError):
            posterior_nshot(ClassLogits(Tensor(np.zeros((1, 0, 1))), Tensor(np.zeros(1))))

    @given(st.integers(1, 4), st.integers(1, 3), st.integers(0, 30), st.floats(0.01, 3.0),
           st.integers(0, 2 ** 31))
    def test_monotone_in_each_logit(self, m, n, pick, bump, seed):
        r = np.random.default_rng(seed)
        e = r.normal(size=(1, m, n)) * 3
        bg = r.normal(size=1) * 3
        i, k = divmod(pick % (m * n), n)
        before = posterior_nshot(ClassLogits(Tensor(e), Tensor(bg))).data[0]
        e2 = e.copy()
        e2[0, i, k] += bump
        after = posterior_nshot(ClassLogits(Tensor(e2), Tensor(bg))).data[0]
        assert after[i + 1] > before[i + 1]
        others = np.delete(np.arange(m + 1), i + 1)
        assert np.all(after[others] < before[others])


class TestOracle:
    """Extended-precision agreement on every small (m, n) instance shape."""

    @pytest.mark.parametrize("m,n", list(itertools.product((1, 2, 3), (1, 2, 3))))
    @pytest.mark.parametrize("mode", ["cosine", "cosine_scale_only", "cosine_no_affine", "l2"])
    def test_posterior(self, m, n, mode):
        rng = np.random.default_rng([m, n, len(mode)])
        for _ in range(5):
            p = params(rng, mode)
            x, w, lg = logits_for(rng, 2, m, n, p)
            fn = posterior_1shot if n == 1 else posterior_nshot
            got = fn(lg).data
            for r in range(2):
                ex = [[w.data[i * n + k] for k in range(n)] for i in range(m)]
                ref = oracles.posterior(x.data[r], ex, mode, p.gamma.item(), p.beta.item(),
                                        p.bg_weights.data, p.bg_bias.item())
                np.testing.assert_allclose(got[r], [float(v) for v in ref], rtol=0, atol=1e-9)


class TestCosineInvariances:
    @given(st.floats(1e-3, 1e3), st.integers(0, 2 ** 31))
    def test_exemplar_scale_invariance(self, c, seed):
        r = np.random.default_rng(seed)
        p = params(r)
        x, w = Tensor(r.normal(size=(4, D))), r.normal(size=(3, D))
        a = pairwise_logits(x, Tensor(w), p).data
        b = pairwise_logits(x, Tensor(w * c), p).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)
        np.testing.assert_array_equal(a.argmax(axis=1), b.argmax(axis=1))

    def test_no_affine_bounded(self, rng):
        p = params(rng, "cosine_no_affine", gamma=100.0, beta=50.0)
        lg = pairwise_logits(Tensor(rng.normal(size=(50, D)) * 30), Tensor(rng.normal(size=(7, D))), p).data
        assert np.all(np.abs(lg) <= 1.0)


class TestObjectives:
    def test_sigmoid_of_zero(self):
        s = sigmoid_objective_scores(ClassLogits(Tensor(np.zeros((1, 1, 1))), Tensor(np.zeros(1))))
        assert s.item() == 0.5

    def test_sigmoid_loss_targets(self):
        e = Tensor(np.zeros((2, 2, 1)), requires_grad=True)
        lg = ClassLogits(e, Tensor(np.zeros(2)))
        loss = classification_loss(lg, [0, 2], "sigmoid")
        assert loss.item() == pytest.approx(4 * np.log(2.0) / 2)
        loss.backward()
        # gradient s - t: background RoI pushes both down, RoI 1 pulls class 2 up
        np.testing.assert_allclose(e.grad[:, :, 0], [[0.25, 0.25], [0.25, -0.25]])

    def test_softmax_loss_is_ce_on_joint(self, rng):
        lg = ClassLogits(Tensor(rng.normal(size=(3, 2, 1))), Tensor(rng.normal(size=3)))
        t = np.array([0, 1, 2])
        post = posterior_nshot(lg).data
        expected = -np.mean(np.log(post[np.arange(3), t]))
        assert classification_loss(lg, t, "softmax").item() == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("mode,objective,names", [
        ("cosine", "softmax", {"gamma", "beta", "bg_weights", "bg_bias"}),
        ("cosine_scale_only", "softmax", {"gamma", "bg_weights", "bg_bias"}),
        ("cosine_no_affine", "softmax", {"bg_weights", "bg_bias"}),
        ("l2", "softmax", {"bg_weights", "bg_bias"}),
        ("cosine", "sigmoid", {"gamma", "beta"}),
    ])
    def test_trainable_sets(self, rng, mode, objective, names):
        p = ComparatorParams.init(rng, D, mode, objective)
        inv = {id(t): n for n, t in p.named().items()}
        assert {inv[id(t)] for t in p.trainable()} == names

    def test_bad_mode(self, rng):
        with pytest.raises(ValueError):
            ComparatorParams.init(rng, D, "dot")

    def test_exemplar_count_checked(self, rng):
        with pytest.raises(ValueError):
            class_logits(Tensor(np.ones((1, D))), Tensor(np.ones((3, D))), 2, 2, params(rng))

    def test_dimension_mismatch(self, rng):
        with pytest.raises(T.ShapeError):
            pairwise_logits(Tensor(np.ones((1, D))), Tensor(np.ones((2, D + 1))), params(rng))
