"""Confidence map, weight normalization, fusion and gap detection."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zepad.core import ProbabilityVector
from zepad.rfdm import (
    BranchOutput,
    confidence,
    confidence_batch,
    detect_dae,
    fuse_predict,
    fuse_weights,
)


def branch(probs, role):
    return BranchOutput.from_probs(np.asarray(probs, dtype=float), role)


class TestConfidence:
    def test_midpoint(self):
        assert confidence(0.5) == 0.5

    def test_certain(self):
        assert confidence(1.0) == pytest.approx(math.exp(1.5), abs=1e-12)

    def test_low(self):
        assert confidence(0.1) == pytest.approx(0.1 * math.exp(-1.2), abs=1e-12)

    def test_domain(self):
        for bad in (0.0, -0.2, 1.0001):
            with pytest.raises(ValueError):
                confidence(bad)

    def test_strictly_increasing_and_convex(self):
        """Checked by finite differences on a 1000-point grid."""
        m = np.linspace(1e-3, 1.0, 1000)
        c = confidence_batch(m)
        first = np.diff(c)
        assert np.all(first > 0)
        assert np.all(np.diff(first) > 0)

    def test_batch_matches_scalar(self):
        m = np.linspace(0.05, 1.0, 37)
        batch = confidence_batch(m)
        for mi, ci in zip(m, batch):
            assert ci == pytest.approx(confidence(float(mi)), rel=1e-12)


class TestFuseWeights:
    def test_symmetry(self):
        np.testing.assert_allclose(fuse_weights([1.0, 1.0, 1.0]), [1 / 3] * 3)

    def test_direct(self):
        np.testing.assert_allclose(fuse_weights([2.0, 1.0, 1.0]), [0.5, 0.25, 0.25])

    def test_normalization_oracle(self):
        c = np.array([4.4816891, 0.5, 0.5])
        w = fuse_weights(c)
        np.testing.assert_allclose(w, c / c.sum(), atol=1e-12)
        np.testing.assert_allclose(w, [0.817574, 0.091213, 0.091213], atol=1e-6)

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            fuse_weights([1.0, 0.0])
        with pytest.raises(ValueError):
            fuse_weights([1.0])

    @given(st.lists(st.floats(1e-3, 1e3), min_size=2, max_size=8),
           st.floats(1e-3, 1e3))
    def test_sum_one_and_scale_invariant(self, c, scale):
        w = fuse_weights(c)
        assert abs(w.sum() - 1.0) <= 1e-9
        np.testing.assert_allclose(w, fuse_weights(np.asarray(c) * scale), atol=1e-9)


class TestFusePredict:
    def test_identical_branches(self):
        p = [0.2, 0.5, 0.3]
        branches = [branch(p, "bmp"), branch(p, "mpae_victim"), branch(p, "mpae_aux")]
        d = fuse_predict(branches)
        np.testing.assert_allclose(d.fused_probs.probs, p, atol=1e-12)
        assert d.predicted_class == 1

    def test_shared_argmax_preserved(self):
        branches = [branch([0.6, 0.4], "bmp"), branch([0.9, 0.1], "mpae_victim")]
        assert fuse_predict(branches).predicted_class == 0

    def test_equal_confidence_hand_example(self):
        # one-hot vectors all have m = 1, so confidences are equal
        branches = [branch([1.0, 0.0], "bmp"),
                    branch([0.0, 1.0], "mpae_victim"),
                    branch([0.0, 1.0], "mpae_aux")]
        d = fuse_predict(branches)
        np.testing.assert_allclose(d.fused_probs.probs, [1 / 3, 2 / 3], atol=1e-12)
        assert d.predicted_class == 1

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(3)
        probs = rng.dirichlet(np.ones(5), size=3)
        roles = ["bmp", "mpae_victim", "mpae_aux"]
        base = fuse_predict([branch(p, r) for p, r in zip(probs, roles)])
        for perm in itertools.permutations(range(3)):
            d = fuse_predict([branch(probs[i], roles[i]) for i in perm])
            np.testing.assert_allclose(d.fused_probs.probs, base.fused_probs.probs,
                                       atol=1e-12)
            assert d.predicted_class == base.predicted_class

    def test_equal_confidences_match_average_ensemble(self):
        """With equal branch confidences the fusion is exactly the mean."""
        rng = np.random.default_rng(5)
        raw = rng.dirichlet(np.ones(4), size=3)
        # rescale each row's non-max entries so every max equals 0.6
        probs = []
        for row in raw:
            k = row.argmax()
            rest = np.delete(row, k)
            rest = rest / rest.sum() * 0.4
            p = np.insert(rest, k, 0.6)
            probs.append(p)
        branches = [branch(p, r) for p, r in
                    zip(probs, ["bmp", "mpae_victim", "mpae_aux"])]
        d = fuse_predict(branches)
        np.testing.assert_allclose(d.weights, [1 / 3] * 3, atol=1e-12)
        np.testing.assert_allclose(d.fused_probs.probs, np.mean(probs, axis=0), atol=1e-12)

    def test_fused_is_valid_distribution(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            probs = rng.dirichlet(np.ones(6), size=4)
            roles = ["bmp", "mpae_victim", "mpae_aux", "mpae_aux"]
            d = fuse_predict([branch(p, r) for p, r in zip(probs, roles)])
            ProbabilityVector(d.fused_probs.probs)  # re-validate
            assert abs(d.weights.sum() - 1.0) <= 1e-9

    def test_mismatched_k(self):
        with pytest.raises(ValueError):
            fuse_predict([branch([0.5, 0.5], "bmp"),
                          branch([0.3, 0.3, 0.4], "mpae_victim")])


class TestDetectDae:
    def _pair(self, c_bmp_target, c_mpae_target):
        """Build branches whose confidence values hit the given targets."""
        def m_for(c_target):
            # solve m * exp(3(m-0.5)) = c by bisection
            lo, hi = 1e-6, 1.0
            for _ in range(80):
                mid = (lo + hi) / 2
                if confidence(mid) < c_target:
                    lo = mid
                else:
                    hi = mid
            return (lo + hi) / 2

        def probs(m):
            return [m] + [(1 - m) / 9] * 9

        return [branch(probs(m_for(c_bmp_target)), "bmp"),
                branch(probs(m_for(c_mpae_target)), "mpae_victim")]

    def test_flagged_above_threshold(self):
        flagged, gap = detect_dae(self._pair(0.5, 0.65))
        assert gap == pytest.approx(0.15, abs=1e-6)
        assert flagged

    def test_not_flagged_below(self):
        flagged, gap = detect_dae(self._pair(0.5, 0.55))
        assert gap == pytest.approx(0.05, abs=1e-6)
        assert not flagged

    def test_boundary_is_strict(self):
        branches = self._pair(0.5, 0.6)
        _, gap = detect_dae(branches, threshold=0.0)
        flagged, _ = detect_dae(branches, threshold=gap)  # gap > gap is false
        assert not flagged

    def test_missing_role(self):
        with pytest.raises(ValueError):
            detect_dae([branch([0.5, 0.5], "bmp")])

    def test_max_prob_variant(self):
        branches = self._pair(0.4, 0.9)
        _, gap_c = detect_dae(branches)
        _, gap_m = detect_dae(branches, use_max_prob=True)
        assert gap_c != pytest.approx(gap_m)


class TestBranchOutput:
    def test_m_must_match(self):
        pv = ProbabilityVector(np.array([0.3, 0.7]))
        with pytest.raises(ValueError):
            BranchOutput(probs=pv, m=0.6, c=confidence(0.6), branch_role="bmp")

    def test_c_must_match(self):
        pv = ProbabilityVector(np.array([0.3, 0.7]))
        with pytest.raises(ValueError):
            BranchOutput(probs=pv, m=0.7, c=0.5, branch_role="bmp")

    def test_unknown_role(self):
        with pytest.raises(ValueError):
            branch([0.5, 0.5], "other")
