import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from affectlab.core import Task
from affectlab.errors import DegenerateInputError, ShapeError
from affectlab.metrics import (
    MetricReport,
    accuracy,
    au_report,
    ccc_metric,
    expr_report,
    f1_final_expr,
    f1_per_class,
    mean_f1_au,
    va_report,
)


def reference_ccc(predictions, targets):
    """From-the-definition oracle: Pearson rho and the std/mean terms computed
    separately, population convention."""
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    mp, mt = p.mean(), t.mean()
    sp = np.sqrt(np.mean((p - mp) ** 2))
    st_ = np.sqrt(np.mean((t - mt) ** 2))
    rho = np.mean((p - mp) * (t - mt)) / (sp * st_)
    return 2.0 * rho * sp * st_ / (sp ** 2 + st_ ** 2 + (mp - mt) ** 2)


class TestCCCMetric:
    def test_identical_vectors(self):
        y = [0.2, -0.4, 0.9]
        assert ccc_metric(y, y) == pytest.approx(1.0, abs=1e-12)

    def test_antisymmetric_pair(self):
        assert ccc_metric([0.0, 1.0], [1.0, 0.0]) == pytest.approx(-1.0, abs=1e-12)

    def test_constant_shift(self):
        # targets [0, 1]: variances 0.25 each, means differ by 10
        value = ccc_metric([10.0, 11.0], [0.0, 1.0])
        assert value == pytest.approx(2 * 0.25 / (0.5 + 100.0), abs=1e-12)

    def test_constant_sequence_different_means(self):
        assert ccc_metric([0.5, 0.5, 0.5], [0.0, 1.0, 0.5]) == pytest.approx(0.0, abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            ccc_metric([0.5, 0.5], [0.5, 0.5])

    def test_too_short(self):
        with pytest.raises(ShapeError):
            ccc_metric([1.0], [1.0])

    def test_against_reference_oracle(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            n = int(rng.integers(2, 65))
            p = rng.standard_normal(n)
            t = rng.standard_normal(n)
            assert ccc_metric(p, t) == pytest.approx(reference_ccc(p, t), abs=1e-9)

    @settings(deadline=None, max_examples=50)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_symmetry_and_range(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.standard_normal(8), rng.standard_normal(8)
        a, b = ccc_metric(p, t), ccc_metric(t, p)
        assert a == pytest.approx(b, abs=1e-12)
        assert -1.0 - 1e-12 <= a <= 1.0 + 1e-12


class TestF1PerClass:
    def test_perfect(self):
        labels = [0, 1, 2, 0, 1, 2]
        np.testing.assert_allclose(f1_per_class(labels, labels, 3), np.ones(3))

    def test_all_predicted_one_class(self):
        # labels balanced over {0, 1}, predictions all 0
        out = f1_per_class([0, 0, 0, 0], [0, 0, 1, 1], 2)
        np.testing.assert_allclose(out, [2 / 3, 0.0])

    def test_empty_class_scores_zero(self):
        out = f1_per_class([0, 1], [0, 1], 3)
        np.testing.assert_allclose(out, [1.0, 1.0, 0.0])

    @settings(deadline=None, max_examples=50)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 30))
        preds = rng.integers(0, 4, n)
        labels = rng.integers(0, 4, n)
        perm = rng.permutation(n)
        np.testing.assert_allclose(
            f1_per_class(preds, labels, 4), f1_per_class(preds[perm], labels[perm], 4)
        )


class TestF1FinalExpr:
    def test_perfect(self):
        labels = list(range(8))
        assert f1_final_expr(labels, labels) == pytest.approx(1.0)

    def test_half_classes_absent(self):
        preds = labels = [0, 1, 2, 3]
        assert f1_final_expr(preds, labels) == pytest.approx(0.5)

    def test_single_class_prediction_uniform_labels(self):
        # per-class F1 for the predicted class: 2(N/8)/(2N/8 + 7N/8) = 2/9
        labels = np.repeat(np.arange(8), 4)
        preds = np.zeros_like(labels)
        assert f1_final_expr(preds, labels) == pytest.approx((2 / 9) / 8, abs=1e-12)


class TestMeanF1AU:
    def test_perfect(self):
        labels = np.random.default_rng(0).integers(0, 2, (20, 12))
        report = mean_f1_au(labels.astype(float), labels)
        assert report.values["f1_mean"] == pytest.approx(1.0)

    def test_all_zero_predictions(self):
        labels = np.ones((4, 12), dtype=int)
        report = mean_f1_au(np.zeros((4, 12)), labels)
        assert report.values["f1_mean"] == pytest.approx(0.0)

    def test_single_column_hand_value(self):
        probs = np.full((3, 12), 0.0)
        labels = np.zeros((3, 12), dtype=int)
        probs[:, 0] = [0.9, 0.2, 0.7]
        labels[:, 0] = [1, 0, 0]
        report = mean_f1_au(probs, labels, threshold=0.5)
        assert report.values["f1_AU1"] == pytest.approx(2 / 3)

    def test_threshold_tie_is_positive(self):
        probs = np.zeros((1, 12))
        probs[0, 0] = 0.5
        labels = np.zeros((1, 12), dtype=int)
        labels[0, 0] = 1
        report = mean_f1_au(probs, labels, threshold=0.5)
        assert report.values["f1_AU1"] == pytest.approx(1.0)

    def test_matches_binary_f1_per_class(self):
        rng = np.random.default_rng(77)
        probs = rng.random((30, 12))
        labels = rng.integers(0, 2, (30, 12))
        report = mean_f1_au(probs, labels, threshold=0.5)
        for j in range(12):
            binarized = (probs[:, j] >= 0.5).astype(int)
            expected = f1_per_class(binarized, labels[:, j], 2)[1]
            key = list(report.values)[j]
            assert report.values[key] == pytest.approx(expected, abs=1e-12)

    def test_rejects_nonbinary_labels(self):
        with pytest.raises(ShapeError):
            mean_f1_au(np.zeros((2, 12)), np.full((2, 12), -1))


class TestAccuracy:
    def test_cases(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
        assert accuracy([1, 2, 3], [4, 5, 6]) == 0.0
        assert accuracy([1, 2, 3, 4], [1, 2, 0, 0]) == 0.5


class TestReports:
    def test_va_report_includes_x100(self):
        report = va_report(0.257, 0.383)
        assert report.values["ccc_mean"] == pytest.approx(0.32)
        assert report.values["ccc_valence_x100"] == pytest.approx(25.7)

    def test_text_and_json_round_trip(self, tmp_path):
        report = au_report(np.linspace(0, 1, 12))
        report.save(tmp_path / "metrics")
        assert (tmp_path / "metrics.json").exists()
        text = (tmp_path / "metrics.txt").read_text()
        assert "f1_mean" in text and text.startswith("task = au")

    def test_expr_report_shape_check(self):
        with pytest.raises(ShapeError):
            expr_report(np.zeros(7), 0.5)
