"""Domain types and the BA/RA/ASR metrics."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from zepad.core import (
    ImageBatch,
    LabelBatch,
    MetricsReport,
    PerturbationBudget,
    ProbabilityVector,
    UniversalPerturbation,
    argmax_class,
    attack_success_rate,
    benign_accuracy,
    robust_accuracy,
)


class TestArgmax:
    def test_unique_max(self):
        assert argmax_class(ProbabilityVector(np.array([0.1, 0.7, 0.2]))) == 1

    def test_tie_breaks_low(self):
        assert argmax_class(ProbabilityVector(np.array([0.5, 0.5]))) == 0

    def test_full_tie(self):
        assert argmax_class(ProbabilityVector(np.array([0.25] * 4))) == 0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            argmax_class(np.array([]))

    @given(st.lists(st.floats(0.01, 10.0), min_size=2, max_size=12),
           st.floats(0.1, 100.0))
    def test_scale_invariant(self, scores, scale):
        """Positive rescaling before normalization never moves the argmax."""
        scores = np.asarray(scores)
        p1 = ProbabilityVector(scores / scores.sum())
        scaled = scores * scale
        p2 = ProbabilityVector(scaled / scaled.sum())
        assert argmax_class(p1) == argmax_class(p2)


class TestAccuracies:
    def test_all_correct(self):
        labels = LabelBatch(np.zeros(10, dtype=np.int64), 10)
        assert benign_accuracy([0] * 10, labels) == 100.0

    def test_none_correct(self):
        labels = LabelBatch(np.zeros(10, dtype=np.int64), 10)
        assert benign_accuracy([1] * 10, labels) == 0.0

    def test_three_of_four(self):
        # counting oracle: 3 matches out of 4
        labels = LabelBatch(np.array([0, 1, 2, 3]), 10)
        assert benign_accuracy([0, 1, 2, 9], labels) == 75.0

    def test_robust_half_of_eight(self):
        labels = LabelBatch(np.arange(8) % 4, 10)
        preds = [0, 1, 2, 3, 1, 2, 3, 0]
        expected = 100.0 * sum(p == l for p, l in zip(preds, labels.labels)) / 8
        assert robust_accuracy(preds, labels) == expected == 50.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            benign_accuracy([], LabelBatch(np.array([], dtype=np.int64), 10))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            benign_accuracy([0, 1], LabelBatch(np.array([0]), 10))


class TestAttackSuccessRate:
    def test_no_change(self):
        assert attack_success_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_all_change(self):
        assert attack_success_rate([1, 2, 3], [2, 3, 1]) == 100.0

    def test_three_of_four(self):
        assert attack_success_rate([0, 0, 0, 0], [1, 1, 1, 0]) == 75.0

    @given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)),
                    min_size=1, max_size=50))
    def test_complement_identity(self, pairs):
        """ASR plus 100x the unchanged fraction is exactly 100."""
        clean = [a for a, _ in pairs]
        adv = [b for _, b in pairs]
        asr = attack_success_rate(clean, adv)
        unchanged = sum(a == b for a, b in pairs) / len(pairs)
        assert asr + 100.0 * unchanged == pytest.approx(100.0, abs=1e-9)
        assert 0.0 <= asr <= 100.0


class TestTypes:
    def test_image_batch_range(self):
        with pytest.raises(ValueError):
            ImageBatch(np.full((1, 3, 4, 4), 1.5))

    def test_image_batch_rank(self):
        with pytest.raises(ValueError):
            ImageBatch(np.zeros((3, 4, 4)))

    def test_probability_vector_sum(self):
        with pytest.raises(ValueError):
            ProbabilityVector(np.array([0.5, 0.6]))

    def test_probability_vector_negative(self):
        with pytest.raises(ValueError):
            ProbabilityVector(np.array([-0.1, 1.1]))

    def test_budget_range(self):
        with pytest.raises(ValueError):
            PerturbationBudget(0.0)
        with pytest.raises(ValueError):
            PerturbationBudget(0.1, norm_order="2")

    def test_perturbation_budget_enforced(self):
        budget = PerturbationBudget(10 / 255)
        with pytest.raises(ValueError):
            UniversalPerturbation(np.full((3, 4, 4), 0.1), budget)
        UniversalPerturbation(np.full((3, 4, 4), 10 / 255), budget)  # boundary ok

    def test_perturbed_images_stay_valid(self):
        budget = PerturbationBudget(10 / 255)
        delta = UniversalPerturbation(np.full((3, 4, 4), 10 / 255), budget)
        x = np.random.default_rng(0).random((2, 3, 4, 4))
        out = np.clip(x + delta.delta, 0, 1)
        ImageBatch(out)  # must not raise


class TestMetricsReport:
    def test_range_validation(self):
        with pytest.raises(ValueError):
            MetricsReport(ba=101.0, ra=0.0, asr=0.0, n_eval=10)

    def test_json_roundtrip(self):
        import json

        r = MetricsReport(ba=85.0, ra=70.0, asr=20.0, n_eval=1000, detection_acc=80.0)
        d = json.loads(r.to_json())
        assert d["ba"] == 85.0 and d["detection_acc"] == 80.0 and d["n_eval"] == 1000

    def test_csv_row(self):
        r = MetricsReport(ba=85.0, ra=70.0, asr=20.0, n_eval=1000)
        row = r.to_csv_row("exp1")
        assert row.split(",") == ["exp1", "85", "70", "20", "", "1000"]
