import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from catprior.errors import ConfigurationError, TrainingError, UsageError
from catprior.nn import (
    AdamState, ParamSet, adam_step, backward, categorical_stats, entropy_grad, gaussian_logp_grads,
    gaussian_stats, kl_grads, log_softmax, mlp_forward, sample_categorical, softmax,
)
from helpers import gradcheck, relative_error


class TestParamSet:
    def test_init_shapes(self, rng):
        p = ParamSet.init([5, 7, 3], rng)
        assert p.widths == [5, 7, 3]
        assert [a.shape for a in p.arrays()] == [(5, 7), (7,), (7, 3), (3,)]
        assert p.activations == ["tanh", "linear"]

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            ParamSet([np.zeros((2, 3)), np.zeros((4, 1))], [np.zeros(3), np.zeros(1)], ["tanh", "linear"])

    def test_unknown_activation_rejected(self):
        with pytest.raises(ConfigurationError):
            ParamSet([np.zeros((2, 3))], [np.zeros(3)], ["relu6"])

    def test_copy_is_deep(self, rng):
        p = ParamSet.init([2, 2], rng)
        q = p.copy()
        q.weights[0][0, 0] += 1.0
        assert p.weights[0][0, 0] != q.weights[0][0, 0]


class TestForwardBackward:
    def test_input_width_checked(self, rng):
        with pytest.raises(ConfigurationError):
            mlp_forward(ParamSet.init([3, 2], rng), np.zeros((4, 5)))

    def test_trace_single_use(self, rng):
        p = ParamSet.init([3, 2], rng)
        y, tr = mlp_forward(p, np.ones((1, 3)))
        backward(tr, np.ones_like(y))
        with pytest.raises(UsageError):
            backward(tr, np.ones_like(y))

    def test_vector_input_round_trips(self, rng):
        p = ParamSet.init([3, 4, 2], rng)
        x = rng.standard_normal(3)
        y, tr = mlp_forward(p, x)
        yb, _ = mlp_forward(p, x[None])
        np.testing.assert_allclose(y, yb[0])
        grads, gx = backward(tr, np.ones(2))
        assert gx.shape == (3,)

    @pytest.mark.parametrize("seed", range(10))
    def test_parameter_and_input_gradients(self, seed):
        rng = np.random.default_rng(seed)
        p = ParamSet.init([4, 6, 5, 3], rng)
        x = rng.standard_normal((7, 4))
        w = rng.standard_normal((7, 3))

        def loss():
            return float((mlp_forward(p, x)[0] * w).sum())

        _, tr = mlp_forward(p, x)
        grads, gx = backward(tr, w)
        assert gradcheck(loss, p.arrays(), grads, rng, n_coords=12) < 1e-6
        assert gradcheck(loss, [x], [gx], rng, n_coords=6) < 1e-6


class TestCategorical:
    @given(st.lists(st.floats(-30, 30), min_size=2, max_size=12))
    def test_softmax_normalized(self, logits):
        p = softmax(np.array(logits))
        assert math.isclose(p.sum(), 1.0, rel_tol=1e-12)
        assert np.all(p >= 0)

    def test_log_softmax_shift_invariant(self, rng):
        x = rng.standard_normal((3, 5))
        np.testing.assert_allclose(log_softmax(x), log_softmax(x + 100.0), atol=1e-12)

    def test_entropy_of_uniform(self):
        st_ = categorical_stats(np.zeros(6))
        assert math.isclose(float(st_["entropy"]), math.log(6), rel_tol=1e-12)

    def test_kl_zero_for_identical(self, rng):
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(categorical_stats(x, x)["kl"], 0.0, atol=1e-12)

    def test_k_mismatch_raises(self):
        with pytest.raises(UsageError):
            categorical_stats(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_extreme_logits_stay_finite(self):
        st_ = categorical_stats(np.array([[1e4, -1e4, 0.0]]), np.array([[-1e4, 1e4, 0.0]]))
        assert np.all(np.isfinite(st_["log_probs"])) and np.isfinite(st_["kl"]).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_entropy_and_kl_gradients(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.standard_normal(6)
        q = rng.standard_normal(6)
        h = 1e-6
        fd_h = np.array([(categorical_stats(p + h * e)["entropy"] - categorical_stats(p - h * e)["entropy"]) / (2 * h)
                         for e in np.eye(6)])
        assert relative_error(entropy_grad(p), fd_h) < 1e-7
        kl = lambda a, b: float(categorical_stats(a, b)["kl"])  # noqa: E731
        gp, gq = kl_grads(p, q)
        fd_p = np.array([(kl(p + h * e, q) - kl(p - h * e, q)) / (2 * h) for e in np.eye(6)])
        fd_q = np.array([(kl(p, q + h * e) - kl(p, q - h * e)) / (2 * h) for e in np.eye(6)])
        assert relative_error(gp, fd_p) < 1e-7
        assert relative_error(gq, fd_q) < 1e-7

    def test_sampling_frequencies(self):
        rng = np.random.default_rng(1)
        logits = np.log(np.array([0.1, 0.2, 0.7]))
        draws = sample_categorical(np.tile(logits, (40000, 1)), rng)
        np.testing.assert_allclose(np.bincount(draws, minlength=3) / 40000, [0.1, 0.2, 0.7], atol=0.01)


class TestGaussian:
    def test_log_prob_matches_closed_form(self):
        lp = gaussian_stats(np.zeros(1), np.zeros(1), np.zeros(1))["log_prob"]
        assert math.isclose(float(lp), -0.5 * math.log(2 * math.pi), rel_tol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(UsageError):
            gaussian_stats(np.zeros(2), np.zeros(3), np.zeros(2))

    def test_grads(self, rng):
        m, ls, a = rng.standard_normal(3), rng.standard_normal(3) * 0.3, rng.standard_normal(3)
        gm, gs = gaussian_logp_grads(m, ls, a)
        h = 1e-6
        f = lambda m_, s_: float(gaussian_stats(m_, s_, a)["log_prob"])  # noqa: E731
        fd_m = [(f(m + h * e, ls) - f(m - h * e, ls)) / (2 * h) for e in np.eye(3)]
        fd_s = [(f(m, ls + h * e) - f(m, ls - h * e)) / (2 * h) for e in np.eye(3)]
        assert relative_error(gm, fd_m) < 1e-7
        assert relative_error(gs, fd_s) < 1e-7


class TestAdam:
    def test_first_step_moves_by_lr(self):
        p = [np.array([1.0, -2.0])]
        st_ = AdamState.for_arrays(p, lr=0.1)
        adam_step(p, [np.array([3.0, -0.5])], st_)
        np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-6)

    def test_non_finite_gradient_raises(self):
        p = [np.zeros(2)]
        with pytest.raises(TrainingError):
            adam_step(p, [np.array([np.nan, 0.0])], AdamState.for_arrays(p, 0.1))

    def test_misaligned_state_raises(self):
        with pytest.raises(UsageError):
            adam_step([np.zeros(2)], [np.zeros(3)], AdamState.for_arrays([np.zeros(2)], 0.1))

    def test_grad_norm_clipping(self):
        p1, p2 = [np.zeros(2)], [np.zeros(2)]
        s1 = AdamState.for_arrays(p1, 0.1, max_grad_norm=1.0)
        s2 = AdamState.for_arrays(p2, 0.1)
        g = np.array([30.0, 40.0])
        adam_step(p1, [g], s1)
        adam_step(p2, [g / 50.0], s2)
        np.testing.assert_allclose(p1[0], p2[0])

    def test_minimizes_quadratic(self):
        x = [np.array([5.0, -3.0])]
        st_ = AdamState.for_arrays(x, lr=0.05)
        for _ in range(2000):
            adam_step(x, [2 * x[0]], st_)
        np.testing.assert_allclose(x[0], 0.0, atol=1e-3)
