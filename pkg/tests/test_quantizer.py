import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from catprior.errors import ConfigurationError, UsageError
from catprior.quantizer import (
    Codebook, GaussianBottleneck, commitment_terms, gaussian_bottleneck_loss, gaussian_kl_to_standard,
    log_k, onehot_kl_to_uniform, posterior_onehot, quantize, soft_posterior, straight_through,
)


def brute_force_nearest(codes, z):
    best, best_d = 0, math.inf
    for i, c in enumerate(codes):
        d = float(((z - c) ** 2).sum())
        if d < best_d:
            best, best_d = i, d
    return best


class TestQuantize:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            k, d = int(rng.integers(1, 65)), int(rng.integers(1, 17))
            book = Codebook(rng.standard_normal((k, d)))
            z = rng.standard_normal((5, d))
            res = quantize(book, z)
            expected = [brute_force_nearest(book.codes, zi) for zi in z]
            np.testing.assert_array_equal(res.index, expected)
            np.testing.assert_array_equal(res.z_q, book.codes[expected])

    def test_ties_take_lowest_index(self):
        book = Codebook(np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]]))
        assert int(quantize(book, np.array([0.0, 0.0])).index) == 0
        assert int(quantize(book, np.array([1.0, 0.0])).index) == 0

    def test_empty_codebook_rejected(self):
        with pytest.raises(ConfigurationError):
            quantize(Codebook(np.zeros((0, 3))), np.zeros(3))

    def test_width_mismatch(self):
        with pytest.raises(UsageError):
            quantize(Codebook(np.zeros((2, 3))), np.zeros(4))

    @given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)), arrays(np.float64, 3, elements=st.floats(-5, 5)))
    def test_selected_code_is_a_minimizer(self, codes, z):
        res = quantize(Codebook(codes), z)
        d2 = ((codes - z) ** 2).sum(axis=1)
        assert d2[res.index] == d2.min()
        assert math.isclose(float(res.distance) ** 2, d2.min(), rel_tol=1e-9, abs_tol=1e-12)

    def test_posterior_is_onehot(self, rng):
        book = Codebook(rng.standard_normal((8, 4)))
        post = posterior_onehot(book, rng.standard_normal((10, 4)))
        np.testing.assert_array_equal(post.sum(axis=1), 1.0)
        assert set(np.unique(post)) <= {0.0, 1.0}


class TestSoftPosterior:
    def test_converges_to_onehot(self, rng):
        book = Codebook(rng.standard_normal((16, 4)))
        z = rng.standard_normal((50, 4))
        np.testing.assert_allclose(soft_posterior(book, z, 1e-8), posterior_onehot(book, z), atol=1e-6)

    def test_large_epsilon_approaches_mixing_weights(self, rng):
        book = Codebook(rng.standard_normal((4, 2)))
        deltas = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_allclose(soft_posterior(book, np.zeros(2), 1e8, deltas), deltas, atol=1e-6)

    def test_validation(self, rng):
        book = Codebook(rng.standard_normal((4, 2)))
        with pytest.raises(UsageError):
            soft_posterior(book, np.zeros(2), 0.0)
        with pytest.raises(UsageError):
            soft_posterior(book, np.zeros(2), 1.0, deltas=np.array([0.5, 0.5, 0.5, 0.5]))


class TestCommitment:
    def test_losses_and_stop_gradient_split(self, rng):
        z, c = rng.standard_normal(4), rng.standard_normal(4)
        t = commitment_terms(z, c, beta=0.25)
        sq = float(((z - c) ** 2).sum())
        assert math.isclose(float(t["codebook_loss"]), sq)
        assert math.isclose(float(t["commitment_loss"]), 0.25 * sq)
        np.testing.assert_allclose(t["grad_code"], -2 * (z - c))
        np.testing.assert_allclose(t["grad_z_e"], 0.5 * (z - c))
        np.testing.assert_array_equal(t["grad_code_from_commitment"], 0.0)
        np.testing.assert_array_equal(t["grad_z_e_from_codebook"], 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(UsageError):
            commitment_terms(np.zeros(3), np.zeros(4), 0.25)


class TestStraightThrough:
    @given(arrays(np.float64, 5, elements=st.floats(-10, 10)))
    def test_backward_is_identity(self, g):
        st_ = straight_through(np.zeros(5), np.ones(5))
        np.testing.assert_array_equal(st_.z_q, 1.0)
        gz, gc = st_.backward(g)
        np.testing.assert_array_equal(gz, g)
        np.testing.assert_array_equal(gc, 0.0)


class TestKLProperties:
    @given(st.integers(1, 64), st.integers(0, 63))
    def test_onehot_kl_is_log_k(self, k, i):
        post = np.eye(k)[i % k]
        assert onehot_kl_to_uniform(post) == pytest.approx(log_k(k), abs=1e-12)

    def test_gaussian_kl_varies(self):
        a = gaussian_kl_to_standard(np.zeros(3), np.ones(3))
        b = gaussian_kl_to_standard(np.full(3, 0.5), np.full(3, 0.7))
        assert a == 0.0 and b > a

    def test_bottleneck_anneal(self):
        b = GaussianBottleneck(np.zeros(2), np.ones(2), anneal=(0.0, 1.0, 100))
        assert b.beta_at(0) == 0.0 and b.beta_at(50) == 0.5 and b.beta_at(500) == 1.0
        assert gaussian_bottleneck_loss(b, 10) == 0.0
        with pytest.raises(UsageError):
            GaussianBottleneck(np.zeros(2), np.zeros(2))

    def test_codebook_usage_csv(self, rng):
        book = Codebook.init(3, 2, rng)
        assert book.usage_csv().splitlines()[0] == "code,count"
        assert len(book.usage_csv().splitlines()) == 4
