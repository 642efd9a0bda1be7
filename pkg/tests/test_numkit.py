import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fedshard.numkit import (
    DegenerateVectorError,
    ModelSpec,
    RejectedInputError,
    angle_between,
    evaluate,
    init_params,
    local_train,
    loss_and_grad,
    pack,
    predict_logits,
    unpack,
)


def central_diff(theta, x, y, spec, h=1e-6):
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        fd[i] = (loss_and_grad(theta + e, x, y, spec)[0] - loss_and_grad(theta - e, x, y, spec)[0]) / (2 * h)
    return fd


class TestModelSpec:
    def test_param_count_linear(self):
        assert ModelSpec(8, 4).num_params == 8 * 4 + 4

    def test_param_count_mlp(self):
        spec = ModelSpec(8, 4, architecture="mlp", hidden=16)
        assert spec.num_params == 8 * 16 + 16 * 4 + 16 + 4

    @pytest.mark.parametrize("kw", [
        dict(input_dim=0, num_labels=3),
        dict(input_dim=2, num_labels=1),
        dict(input_dim=2, num_labels=3, architecture="cnn"),
        dict(input_dim=2, num_labels=3, architecture="mlp", hidden=0),
        dict(input_dim=2, num_labels=3, architecture="mlp", activation="gelu"),
    ])
    def test_rejects_bad_spec(self, kw):
        with pytest.raises(RejectedInputError):
            ModelSpec(**kw)


class TestLayout:
    def test_pack_unpack_roundtrip(self):
        spec = ModelSpec(3, 4, architecture="mlp", hidden=5)
        theta = np.arange(spec.num_params, dtype=np.float64)
        w, b = unpack(theta, spec)
        assert [m.shape for m in w] == [(3, 5), (5, 4)]
        assert [v.shape for v in b] == [(5,), (4,)]
        assert np.array_equal(pack(w, b), theta)

    def test_weights_come_before_biases(self):
        spec = ModelSpec(2, 3)
        theta = np.arange(spec.num_params, dtype=np.float64)
        w, b = unpack(theta, spec)
        assert w[0][0, 0] == 0 and w[0][0, 1] == 1  # row-major
        assert np.array_equal(b[0], [6, 7, 8])

    def test_wrong_length_rejected(self):
        with pytest.raises(RejectedInputError):
            unpack(np.zeros(5), ModelSpec(2, 3))

    def test_init_is_seeded_and_bounded(self):
        spec = ModelSpec(16, 4)
        a, b = init_params(spec, 3), init_params(spec, 3)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, init_params(spec, 4))
        assert np.all(np.abs(a) <= 1 / math.sqrt(16))


class TestGradient:
    @pytest.mark.parametrize("spec", [
        ModelSpec(3, 4),
        ModelSpec(4, 3, architecture="mlp", hidden=5),
        ModelSpec(4, 3, architecture="mlp", hidden=5, activation="relu"),
    ])
    def test_matches_finite_differences(self, spec):
        rng = np.random.default_rng(0)
        for _ in range(10):
            x = rng.normal(size=(6, spec.input_dim))
            y = rng.integers(0, spec.num_labels, 6)
            theta = init_params(spec, int(rng.integers(1000))) + 0.1 * rng.normal(size=spec.num_params)
            _, g = loss_and_grad(theta, x, y, spec)
            fd = central_diff(theta, x, y, spec)
            assert np.max(np.abs(g - fd)) <= 1e-5 * max(np.max(np.abs(g)), 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 6), seed=st.integers(0, 2**20))
    def test_linear_gradient_property(self, n, seed):
        spec = ModelSpec(3, 3)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n, 3))
        y = rng.integers(0, 3, n)
        theta = rng.normal(size=spec.num_params)
        _, g = loss_and_grad(theta, x, y, spec)
        fd = central_diff(theta, x, y, spec)
        assert np.allclose(g, fd, atol=1e-6)

    def test_uniform_logits_give_log_l_loss(self):
        spec = ModelSpec(2, 4)
        loss, _ = loss_and_grad(np.zeros(spec.num_params), np.ones((3, 2)), np.array([0, 1, 2]), spec)
        assert loss == pytest.approx(math.log(4))

    def test_bias_gradient_sums_to_zero(self):
        # softmax probabilities minus one-hot sum to zero per sample
        spec = ModelSpec(3, 4)
        rng = np.random.default_rng(1)
        _, g = loss_and_grad(rng.normal(size=spec.num_params), rng.normal(size=(5, 3)),
                             rng.integers(0, 4, 5), spec)
        assert abs(unpack(g, spec)[1][0].sum()) < 1e-12

    @pytest.mark.parametrize("x,y", [
        (np.zeros((0, 2)), np.zeros(0, dtype=int)),
        (np.zeros((2, 3)), np.array([0, 1])),
        (np.zeros((2, 2)), np.array([0, 5])),
        (np.zeros((2, 2)), np.array([0])),
    ])
    def test_bad_batches_rejected(self, x, y):
        spec = ModelSpec(2, 3)
        with pytest.raises(RejectedInputError):
            loss_and_grad(np.zeros(spec.num_params), x, y, spec)


class TestLocalTrain:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.spec = ModelSpec(4, 3)
        self.x = rng.normal(size=(30, 4))
        self.y = rng.integers(0, 3, 30)
        self.theta = init_params(self.spec, 0)

    def test_full_batch_descends(self):
        before = loss_and_grad(self.theta, self.x, self.y, self.spec)[0]
        after = loss_and_grad(local_train(self.theta, self.x, self.y, 20, 0.1, self.spec),
                              self.x, self.y, self.spec)[0]
        assert after < before

    def test_zero_steps_is_copy(self):
        out = local_train(self.theta, self.x, self.y, 0, 0.1, self.spec)
        assert np.array_equal(out, self.theta) and out is not self.theta

    def test_input_not_mutated(self):
        keep = self.theta.copy()
        local_train(self.theta, self.x, self.y, 3, 0.1, self.spec)
        assert np.array_equal(keep, self.theta)

    def test_minibatch_is_reproducible(self):
        a = local_train(self.theta, self.x, self.y, 7, 0.1, self.spec, 8, np.random.default_rng(9))
        b = local_train(self.theta, self.x, self.y, 7, 0.1, self.spec, 8, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_minibatch_needs_rng(self):
        with pytest.raises(RejectedInputError):
            local_train(self.theta, self.x, self.y, 2, 0.1, self.spec, batch_size=4)

    def test_negative_steps_rejected(self):
        with pytest.raises(RejectedInputError):
            local_train(self.theta, self.x, self.y, -1, 0.1, self.spec)


vec = arrays(np.float64, 5, elements=st.floats(-1e3, 1e3, allow_nan=False))


class TestAngle:
    def test_examples(self):
        assert angle_between([1, 0], [0, 1]) == pytest.approx(math.pi / 2)
        assert angle_between([1, 0], [-1, 0]) == pytest.approx(math.pi)
        assert angle_between([1, 1], [2, 2]) == pytest.approx(0.0, abs=1e-7)

    @given(vec)
    def test_self_and_opposite(self, u):
        if np.linalg.norm(u) < 1e-6:
            return
        assert angle_between(u, u) == pytest.approx(0.0, abs=1e-6)
        assert angle_between(u, -u) == pytest.approx(math.pi, abs=1e-6)

    def test_zero_vector(self):
        with pytest.raises(DegenerateVectorError):
            angle_between([0, 0], [1, 0])

    def test_length_mismatch(self):
        with pytest.raises(RejectedInputError):
            angle_between([1, 0], [1, 0, 0])

    @given(vec, vec)
    def test_range_and_symmetry(self, u, v):
        if np.linalg.norm(u) == 0 or np.linalg.norm(v) == 0:
            return
        a = angle_between(u, v)
        assert 0.0 <= a <= math.pi
        assert a == angle_between(v, u)

    @given(vec, st.floats(1e-3, 1e3))
    def test_scale_invariant(self, u, s):
        if np.linalg.norm(u) < 1e-6:
            return
        v = np.roll(u, 1) + 1.0
        assert angle_between(s * u, v) == pytest.approx(angle_between(u, v), abs=1e-6)


class TestEvaluate:
    def test_ties_go_to_lowest_label(self):
        spec = ModelSpec(2, 3)
        rep = evaluate(np.zeros(spec.num_params), np.ones((4, 2)), np.array([0, 0, 1, 2]), spec)
        assert rep.correct == 2 and rep.accuracy == 0.5 and rep.sample_count == 4

    def test_logits_shape(self):
        spec = ModelSpec(2, 3, architecture="mlp", hidden=4)
        assert predict_logits(init_params(spec, 0), np.ones((5, 2)), spec).shape == (5, 3)

    def test_logits_width_checked(self):
        spec = ModelSpec(2, 3)
        with pytest.raises(RejectedInputError):
            predict_logits(np.zeros(spec.num_params), np.ones((5, 4)), spec)
