import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from affectlab.core import Polarity
from affectlab.errors import DegenerateInputError, DomainError, ShapeError
from affectlab.losses import (
    ccc_loss,
    composite_classification_loss,
    dice_loss,
    finite_difference_check,
    focal_loss,
    polarity_cross_entropy,
)


class TestPolarityCrossEntropy:
    def test_confident_correct_is_near_zero(self):
        logits = torch.tensor([[25.0, 0.0, 0.0], [0.0, 0.0, 25.0]])
        labels = [Polarity.NEG_EXTREME, Polarity.POS_EXTREME]
        assert polarity_cross_entropy(logits, labels).item() < 1e-6

    def test_uniform_logits(self):
        value = polarity_cross_entropy(torch.zeros(1, 3), [Polarity.INTERIOR]).item()
        assert value == pytest.approx(math.log(3), abs=1e-6)

    def test_half_probability(self):
        # softmax([ln 2, ln 1, ln 1]) puts exactly 1/2 on class 0
        logits = torch.tensor([[math.log(2.0), 0.0, 0.0]])
        value = polarity_cross_entropy(logits, [Polarity.NEG_EXTREME]).item()
        assert value == pytest.approx(math.log(2), abs=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            polarity_cross_entropy(torch.zeros(2, 3), [Polarity.INTERIOR])
        with pytest.raises(ShapeError):
            polarity_cross_entropy(torch.zeros(2, 4), [0, 1])


class TestCCCLoss:
    def test_perfect_concordance(self):
        y = torch.tensor([0.1, 0.5, -0.3, 0.9])
        assert ccc_loss(y, y).item() == pytest.approx(0.0, abs=1e-7)

    def test_anti_concordance(self):
        value = ccc_loss(torch.tensor([0.0, 1.0]), torch.tensor([1.0, 0.0])).item()
        assert value == pytest.approx(2.0, abs=1e-7)

    def test_constant_predictions(self):
        value = ccc_loss(torch.tensor([0.3, 0.3, 0.3]), torch.tensor([0.0, 0.5, 1.0])).item()
        assert value == pytest.approx(1.0, abs=1e-7)

    def test_both_constant_degenerate(self):
        with pytest.raises(DegenerateInputError):
            ccc_loss(torch.tensor([0.5, 0.5]), torch.tensor([0.2, 0.2]))

    def test_too_short(self):
        with pytest.raises(ShapeError):
            ccc_loss(torch.tensor([1.0]), torch.tensor([1.0]))

    @settings(deadline=None, max_examples=40)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        p, t = rng.standard_normal(12), rng.standard_normal(12)
        perm = rng.permutation(12)
        a = ccc_loss(torch.tensor(p), torch.tensor(t)).item()
        b = ccc_loss(torch.tensor(p[perm]), torch.tensor(t[perm])).item()
        assert a == pytest.approx(b, abs=1e-12)

    @settings(deadline=None, max_examples=40)
    @given(
        st.integers(min_value=0, max_value=2**32 - 1),
        st.floats(min_value=-3, max_value=3, allow_nan=False).filter(lambda a: abs(a) > 1e-3),
        st.floats(min_value=-3, max_value=3, allow_nan=False),
    )
    def test_identical_affine_transform_gives_zero(self, seed, a, b):
        rng = np.random.default_rng(seed)
        y = rng.standard_normal(10)
        z = torch.tensor(a * y + b)
        assert ccc_loss(z, z.clone()).item() == pytest.approx(0.0, abs=1e-9)


class TestDiceLoss:
    def test_one_hot_correct(self):
        probs = torch.eye(3)
        assert dice_loss(probs, [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-9)

    def test_hard_all_wrong_balanced(self):
        probs = torch.tensor([[0.0, 1.0], [1.0, 0.0]])
        assert dice_loss(probs, [0, 1]).item() == pytest.approx(1.0, abs=1e-9)

    def test_hand_computed_value(self):
        probs = torch.tensor([[0.8, 0.2], [0.4, 0.6]])
        # class 0: 2*0.8/(1.6+0.4+0.2); class 1: 2*0.6/(1.2+0.2+0.4)
        expected = 1.0 - 0.5 * (1.6 / 2.2 + 1.2 / 1.8)
        assert dice_loss(probs, [0, 1]).item() == pytest.approx(expected, abs=1e-7)

    def test_absent_class_skipped(self):
        # only class 0 present: loss over that single class
        probs = torch.tensor([[0.9, 0.1], [0.7, 0.3]])
        tp, fp, fn = 1.6, 0.0, 0.4
        expected = 1.0 - 2 * tp / (2 * tp + fp + fn)
        assert dice_loss(probs, [0, 0]).item() == pytest.approx(expected, abs=1e-7)

    def test_rejects_non_simplex(self):
        with pytest.raises(ShapeError, match="simplex"):
            dice_loss(torch.tensor([[2.0, 1.0]]), [0])

    def test_empty_batch(self):
        with pytest.raises(DegenerateInputError):
            dice_loss(torch.zeros(0, 3), [])

    @settings(deadline=None, max_examples=50)
    @given(st.integers(min_value=0, max_value=2**32 - 1), st.integers(min_value=2, max_value=6))
    def test_hard_predictions_match_count_formula(self, seed, k):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 20))
        labels = rng.integers(0, k, n)
        hard = rng.integers(0, k, n)
        probs = np.zeros((n, k))
        probs[np.arange(n), hard] = 1.0

        terms = []
        for cls in sorted(set(labels.tolist())):
            tp = int(np.sum((hard == cls) & (labels == cls)))
            fp = int(np.sum((hard == cls) & (labels != cls)))
            fn = int(np.sum((hard != cls) & (labels == cls)))
            terms.append(2 * tp / (2 * tp + fp + fn))
        expected = 1.0 - float(np.mean(terms))
        assert dice_loss(torch.tensor(probs), labels).item() == pytest.approx(expected, abs=1e-12)


class TestCompositeLoss:
    def test_lambda_zero_is_cross_entropy(self):
        rng = np.random.default_rng(0)
        logits = torch.tensor(rng.standard_normal((6, 4)))
        labels = torch.tensor(rng.integers(0, 4, 6))
        composite = composite_classification_loss(logits, labels, 0.0)
        ce = torch.nn.functional.cross_entropy(logits, labels)
        assert composite.item() == pytest.approx(float(ce), abs=1e-12)

    def test_perfect_predictions_near_zero(self):
        logits = torch.tensor([[40.0, 0.0], [0.0, 40.0]])
        assert composite_classification_loss(logits, [0, 1], 1.0).item() < 1e-6

    def test_breakdown_matches_standalone_ops(self):
        rng = np.random.default_rng(1)
        logits = torch.tensor(rng.standard_normal((5, 3)))
        labels = torch.tensor(rng.integers(0, 3, 5))
        lv = composite_classification_loss(logits, labels, 1.0)
        ce = torch.nn.functional.cross_entropy(logits, labels)
        dice = dice_loss(torch.softmax(logits, dim=1), labels)
        assert float(lv.breakdown["cross_entropy"]) == float(ce)
        assert float(lv.breakdown["dice"]) == float(dice.value)
        assert lv.item() == pytest.approx(float(ce) + dice.item(), abs=1e-9)

    def test_breakdown_sums_to_value(self):
        rng = np.random.default_rng(2)
        logits = torch.tensor(rng.standard_normal((5, 3)))
        labels = torch.tensor(rng.integers(0, 3, 5))
        lv = composite_classification_loss(logits, labels, 2.5)
        total = sum(float(v) for v in lv.breakdown.values())
        assert lv.item() == pytest.approx(total, abs=1e-12)


class TestFocalLoss:
    def test_gamma_zero_alpha_half_is_scaled_bce(self):
        rng = np.random.default_rng(3)
        probs = torch.tensor(rng.uniform(0.05, 0.95, (6, 12)))
        labels = torch.tensor((rng.random((6, 12)) > 0.5).astype(np.float64))
        lv = focal_loss(probs, labels, alpha=0.5, gamma=0.0)
        bce = torch.nn.functional.binary_cross_entropy(probs, labels)
        assert lv.item() == pytest.approx(0.5 * float(bce), abs=1e-9)

    def test_single_cell_hand_value(self):
        lv = focal_loss(
            torch.tensor([[0.5]], dtype=torch.float64),
            torch.tensor([[1.0]], dtype=torch.float64),
            alpha=1.0, gamma=2.0,
        )
        assert lv.item() == pytest.approx(0.25 * math.log(2), abs=1e-12)

    def test_easy_cells_vanish(self):
        probs = torch.tensor([[1.0 - 1e-7, 1e-7]])
        labels = torch.tensor([[1.0, 0.0]])
        assert focal_loss(probs, labels, alpha=0.5, gamma=2.0).item() < 1e-10

    def test_mask_excludes_cells(self):
        probs = torch.tensor([[0.9, 0.1], [0.2, 0.2]])
        labels = torch.tensor([[1.0, 0.0], [1.0, 1.0]])
        mask = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        masked = focal_loss(probs, labels, mask=mask)
        unmasked_row0 = focal_loss(probs[:1], labels[:1])
        assert masked.item() == pytest.approx(unmasked_row0.item(), abs=1e-12)

    def test_empty_mask(self):
        with pytest.raises(DegenerateInputError):
            focal_loss(torch.tensor([[0.5]]), torch.tensor([[1.0]]), mask=torch.tensor([[0.0]]))

    def test_monotone_in_pt(self):
        # per-cell contribution never increases as p_t grows
        ps = torch.linspace(0.01, 0.99, 50).view(-1, 1)
        labels = torch.ones_like(ps)
        values = [focal_loss(ps[i:i + 1], labels[i:i + 1]).item() for i in range(len(ps))]
        assert all(a >= b - 1e-12 for a, b in zip(values, values[1:]))

    def test_alpha_scales_positive_contributions(self):
        probs = torch.tensor([[0.3, 0.6]])
        labels = torch.tensor([[1.0, 1.0]])
        base = focal_loss(probs, labels, alpha=0.25, gamma=2.0).item()
        doubled = focal_loss(probs, labels, alpha=0.5, gamma=2.0).item()
        assert doubled == pytest.approx(2.0 * base, rel=1e-9)


class TestFiniteDifferenceCheck:
    def test_epsilon_domain(self):
        with pytest.raises(DomainError):
            finite_difference_check(lambda x: x.sum(), [np.ones(3)], epsilon=1e-2)

    def test_quadratic_gradient(self):
        err = finite_difference_check(lambda x: (x ** 2).sum(), [np.array([1.0, -2.0, 3.0])])
        assert err < 1e-8

    @pytest.mark.parametrize("n", [4, 16])
    def test_ccc_gradient(self, n):
        rng = np.random.default_rng(n)
        err = finite_difference_check(
            lambda p, t: ccc_loss(p, t), [rng.standard_normal(n), rng.standard_normal(n)]
        )
        assert err < 1e-4

    def test_focal_gradient(self):
        rng = np.random.default_rng(5)
        labels = (rng.random((4, 12)) > 0.5).astype(np.float64)
        err = finite_difference_check(
            lambda p: focal_loss(p, labels, alpha=0.25, gamma=2.0),
            [rng.uniform(0.1, 0.9, (4, 12))],
        )
        assert err < 1e-4

    def test_composite_gradient(self):
        rng = np.random.default_rng(6)
        labels = rng.integers(0, 4, 8)
        err = finite_difference_check(
            lambda lg: composite_classification_loss(lg, labels, 0.5),
            [rng.standard_normal((8, 4))],
        )
        assert err < 1e-4
