"""Pairwise distance matrix, binary-KL feature loss, hybrid loss."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from zepad.advtune import (
    AdvTuneConfig,
    HybridLossConfig,
    PairwiseDistanceMatrix,
    binary_kl,
    classification_loss,
    feature_loss,
    hybrid_loss,
    pairwise_distance,
)


def random_distance_matrix(rng, n):
    """A valid row-normalized matrix with zero diagonal and clamped entries."""
    raw = rng.uniform(0.05, 1.0, size=(n, n))
    np.fill_diagonal(raw, 0.0)
    d = raw / raw.sum(axis=1, keepdims=True)
    return PairwiseDistanceMatrix(np.clip(d, 1e-6, 1 - 1e-6) * (1 - np.eye(n)))


class TestPairwiseDistance:
    def test_orthogonal_triple(self):
        """Three orthogonal unit vectors: similarity 0 everywhere, nearest
        neighbor 0, so every off-diagonal entry normalizes to 1/2."""
        d = pairwise_distance(np.eye(3))
        expected = 0.5 * (1 - np.eye(3))
        np.testing.assert_allclose(d.d, expected, atol=1e-9)

    def test_scale_invariance_exact(self):
        rng = np.random.default_rng(0)
        f = rng.standard_normal((6, 16))
        np.testing.assert_allclose(pairwise_distance(f).d,
                                   pairwise_distance(2.0 * f).d, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(1)
        for n in (2, 3, 8, 33, 64):
            for dim in (2, 17, 256):
                d = pairwise_distance(rng.standard_normal((n, dim)))
                np.testing.assert_allclose(d.d.sum(axis=1), 1.0, atol=1e-6 + 1e-12)

    def test_zero_norm_row_rejected(self):
        f = np.ones((3, 4))
        f[1] = 0.0
        with pytest.raises(ValueError, match="degenerate"):
            pairwise_distance(f)

    def test_needs_two_rows(self):
        with pytest.raises(ValueError):
            pairwise_distance(np.ones((1, 4)))

    def test_diagonal_zero_and_entries_open_interval(self):
        rng = np.random.default_rng(2)
        d = pairwise_distance(rng.standard_normal((10, 8))).d
        assert np.all(np.diag(d) == 0.0)
        off = d[~np.eye(10, dtype=bool)]
        assert off.min() > 0.0 and off.max() < 1.0

    def test_validation_rejects_bad_matrices(self):
        with pytest.raises(ValueError):
            PairwiseDistanceMatrix(np.array([[0.0, 0.5], [0.5, 0.5]]))  # bad diag
        with pytest.raises(ValueError):
            PairwiseDistanceMatrix(np.array([[0.0, 0.4], [0.4, 0.0]]))  # rows != 1


class TestFeatureLoss:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(3)
        d = random_distance_matrix(rng, 5)
        assert feature_loss(d, d) == 0.0

    def test_single_pair_oracle(self):
        # scalar oracle, natural log: p log(p/q) + (1-p) log((1-p)/(1-q))
        expected = 0.5 * math.log(2.0) + 0.5 * math.log(0.5 / 0.75)
        assert expected == pytest.approx(0.14384, abs=5e-6)
        assert binary_kl(0.5, 0.25) == pytest.approx(expected, abs=1e-12)

    def test_matches_pairwise_sum_of_binary_kl(self):
        rng = np.random.default_rng(4)
        db = random_distance_matrix(rng, 4)
        da = random_distance_matrix(rng, 4)
        manual = sum(
            binary_kl(db.d[i, j], da.d[i, j])
            for i in range(4) for j in range(4) if i != j
        )
        assert feature_loss(db, da) == pytest.approx(manual, rel=1e-9)

    def test_nonnegative_over_random_matrices(self):
        rng = np.random.default_rng(5)
        worst = np.inf
        for _ in range(1000):
            n = int(rng.integers(2, 9))
            val = feature_loss(random_distance_matrix(rng, n),
                               random_distance_matrix(rng, n))
            worst = min(worst, val)
        assert worst >= 0.0

    def test_shape_mismatch(self):
        rng = np.random.default_rng(6)
        with pytest.raises(ValueError):
            feature_loss(random_distance_matrix(rng, 3), random_distance_matrix(rng, 4))

    def test_binary_kl_domain(self):
        with pytest.raises(ValueError):
            binary_kl(0.0, 0.5)
        with pytest.raises(ValueError):
            binary_kl(0.5, 1.0)


class TestClassificationLoss:
    def test_one_hot_correct_is_tiny(self):
        probs = np.zeros((1, 10))
        probs[0, 3] = 1.0
        loss = classification_loss(probs, np.array([3]))
        assert 0.0 <= loss <= -math.log(1 - 1e-6)

    def test_uniform_is_log_k(self):
        probs = np.full((4, 10), 0.1)
        assert classification_loss(probs, np.zeros(4, dtype=int)) == pytest.approx(
            math.log(10), rel=1e-9)

    def test_one_hot_wrong_clamps(self):
        probs = np.zeros((1, 10))
        probs[0, 1] = 1.0
        assert classification_loss(probs, np.array([0])) == pytest.approx(
            -math.log(1e-6), rel=1e-9)


class TestHybridLoss:
    def test_lambda_zero(self):
        assert hybrid_loss(1.7, 0.4, HybridLossConfig(lambda_=0.0)) == 1.7

    def test_arithmetic(self):
        assert hybrid_loss(1.0, 0.1, HybridLossConfig(lambda_=20.0)) == pytest.approx(3.0)

    def test_zero_feature_term(self):
        for lam in (0.0, 1.0, 20.0, 100.0):
            assert hybrid_loss(2.5, 0.0, HybridLossConfig(lambda_=lam)) == 2.5

    @given(st.floats(0.0, 10.0), st.floats(0.0, 5.0), st.floats(0.0, 5.0),
           st.floats(0.0, 50.0))
    def test_linear_in_feature_term(self, lc, lf1, lf2, lam):
        """Slope in the feature term is exactly lambda."""
        cfg = HybridLossConfig(lambda_=lam)
        lhs = hybrid_loss(lc, lf1, cfg) - hybrid_loss(lc, lf2, cfg)
        assert lhs == pytest.approx(lam * (lf1 - lf2), abs=1e-9)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            HybridLossConfig(lambda_=-1.0)
        with pytest.raises(ValueError):
            AdvTuneConfig(epochs=0)
        with pytest.raises(ValueError):
            AdvTuneConfig(batch_size=1)
