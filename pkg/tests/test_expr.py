import itertools
from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from affectlab.config import ExprScheme
from affectlab.core import Task
from affectlab.data import filter_split, generate_synthetic
from affectlab.errors import ConfigError
from affectlab.expr import (
    EnsemblePrediction,
    bootstrap_sample,
    meta_vote,
    original_video_id,
    predict_ensemble,
    predict_sub,
    train_subclassifier,
)
from affectlab.metrics import accuracy

from conftest import tiny_config


def oracle_vote(decisions, probabilities=None):
    """Brute-force restatement of the voting rules, written independently."""
    # rule 1 + 2: any priority class present wins, ordered 2 > 3 > 5 > 1
    winners = []
    for candidate in (2, 3, 5, 1):
        for d in decisions:
            if d == candidate:
                winners.append(candidate)
    if winners:
        return winners[0]
    # rule 3: majority; ties -> highest mean probability, then smallest index
    tally = {}
    for d in decisions:
        tally[d] = tally.get(d, 0) + 1
    best_count = max(tally.values())
    tied = sorted(d for d, c in tally.items() if c == best_count)
    if len(tied) == 1 or probabilities is None:
        return tied[0]
    means = np.asarray(probabilities, dtype=float).mean(axis=0)
    ranked = sorted(tied, key=lambda d: (-means[d], d))
    if len(ranked) > 1 and means[ranked[0]] == means[ranked[1]]:
        return tied[0]
    return ranked[0]


class TestMetaVote:
    @pytest.mark.parametrize("decisions,expected", [
        ([7, 7, 2], 2),
        ([3, 5, 0, 1], 3),
        ([0, 0, 4], 0),
        ([0, 0, 0, 0, 5], 5),
        ([6], 6),
    ])
    def test_rule_examples(self, decisions, expected):
        assert meta_vote(decisions) == expected

    def test_majority_tie_smallest_index_fallback(self):
        assert meta_vote([4, 4, 6, 6]) == 4

    def test_majority_tie_uses_mean_probability(self):
        probs = np.zeros((2, 8))
        probs[:, 6] = 0.6
        probs[:, 4] = 0.3
        assert meta_vote([4, 6], probabilities=probs) == 6

    def test_exhaustive_three_voters(self):
        for decisions in itertools.product(range(8), repeat=3):
            assert meta_vote(list(decisions)) == oracle_vote(list(decisions))

    def test_random_five_voters(self):
        rng = np.random.default_rng(123)
        for _ in range(1000):
            decisions = rng.integers(0, 8, 5).tolist()
            probs = rng.random((5, 8))
            probs /= probs.sum(axis=1, keepdims=True)
            assert meta_vote(decisions, probs) == oracle_vote(decisions, probs)

    @settings(deadline=None, max_examples=100)
    @given(st.lists(st.integers(min_value=0, max_value=7), min_size=1, max_size=9),
           st.randoms(use_true_random=False))
    def test_permutation_invariance(self, decisions, rnd):
        shuffled = decisions[:]
        rnd.shuffle(shuffled)
        assert meta_vote(decisions) == meta_vote(shuffled)

    @settings(deadline=None, max_examples=100)
    @given(st.lists(st.sampled_from([0, 4, 6, 7]), min_size=1, max_size=6),
           st.sampled_from([1, 2, 3, 5]),
           st.integers(min_value=0, max_value=6))
    def test_priority_dominance(self, decisions, priority_class, position):
        inserted = decisions[:]
        inserted.insert(min(position, len(decisions)), priority_class)
        assert meta_vote(inserted) == priority_class

    @settings(deadline=None, max_examples=100)
    @given(st.lists(st.integers(min_value=0, max_value=7), min_size=1, max_size=7))
    def test_output_in_decision_set(self, decisions):
        assert meta_vote(decisions) in set(decisions)


@pytest.fixture(scope="module")
def split():
    cfg = tiny_config(Task.EXPR)
    return filter_split(generate_synthetic(5, 2, 10, Task.EXPR, image_size=16), Task.EXPR, cfg)


class TestBootstrap:
    def test_use_all_is_identity(self, split):
        assert bootstrap_sample(split, 1.0, seed=3, use_all=True) is split

    def test_multiset_size_and_duplicates_possible(self, split):
        out = bootstrap_sample(split, 1.0, seed=3)
        assert out.n_frames() == split.n_frames()
        keys = [(original_video_id(f.video_id), *f.image[0, 0]) for f in out.frames()]
        assert len(set(map(tuple, keys))) < len(keys)  # some frame drawn twice

    def test_fraction_scales_size(self, split):
        out = bootstrap_sample(split, 0.5, seed=3)
        assert out.n_frames() == round(0.5 * split.n_frames())

    def test_different_seeds_differ(self):
        cfg = tiny_config(Task.EXPR)
        big = filter_split(
            generate_synthetic(5, 4, 250, Task.EXPR, image_size=16), Task.EXPR, cfg
        )
        def key_counts(s):
            return Counter(
                (original_video_id(f.video_id), float(f.image.sum())) for f in s.frames()
            )
        a = bootstrap_sample(big, 1.0, seed=1)
        b = bootstrap_sample(big, 1.0, seed=2)
        assert key_counts(a) != key_counts(b)

    def test_invalid_fraction(self, split):
        with pytest.raises(ConfigError):
            bootstrap_sample(split, 0.0, seed=1)


@pytest.fixture(scope="module")
def threshold_sub():
    cfg = tiny_config(Task.EXPR, expr_scheme=ExprScheme.SEVEN_BY_THRESHOLD, epochs=1)
    sub_split = filter_split(
        generate_synthetic(6, 2, 12, Task.EXPR, image_size=16), Task.EXPR, cfg
    )
    sub, _ = train_subclassifier(sub_split, 0, cfg)
    return sub


class TestPredictSub:
    def test_high_confidence_keeps_argmax(self, threshold_sub, rng):
        images = rng.random((3, 16, 16, 3)).astype(np.float32)
        with torch.no_grad():
            threshold_sub.model.head.bias[2] = 30.0
        decisions, probs = predict_sub(threshold_sub, images, ExprScheme.SEVEN_BY_THRESHOLD, 0.5)
        assert (decisions == 2).all()
        assert probs.shape == (3, 8)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_low_confidence_falls_to_other(self, threshold_sub, rng):
        images = rng.random((3, 16, 16, 3)).astype(np.float32)
        with torch.no_grad():
            threshold_sub.model.head.weight.zero_()
            threshold_sub.model.head.bias.zero_()  # uniform: max prob 1/7
        decisions, _ = predict_sub(threshold_sub, images, ExprScheme.SEVEN_BY_THRESHOLD, 0.5)
        assert (decisions == 7).all()

    def test_as_class_scheme_ignores_tau(self, rng):
        cfg = tiny_config(Task.EXPR, epochs=1)
        split = filter_split(
            generate_synthetic(6, 2, 12, Task.EXPR, image_size=16), Task.EXPR, cfg
        )
        sub, _ = train_subclassifier(split, 0, cfg)
        images = rng.random((4, 16, 16, 3)).astype(np.float32)
        low, _ = predict_sub(sub, images, ExprScheme.SEVEN_AS_CLASS, 0.1)
        high, _ = predict_sub(sub, images, ExprScheme.SEVEN_AS_CLASS, 0.9)
        np.testing.assert_array_equal(low, high)


class TestTrainSubclassifier:
    def test_lambda_changes_training(self):
        split = filter_split(
            generate_synthetic(8, 2, 10, Task.EXPR, image_size=16), Task.EXPR,
            tiny_config(Task.EXPR),
        )
        cfg0 = tiny_config(Task.EXPR, epochs=3, lambda_dice=0.0)
        cfg1 = tiny_config(Task.EXPR, epochs=3, lambda_dice=1.0)
        sub0, _ = train_subclassifier(split, 0, cfg0)
        sub1, _ = train_subclassifier(split, 0, cfg1)
        deltas = [
            float((p0 - p1).detach().abs().max())
            for p0, p1 in zip(sub0.model.parameters(), sub1.model.parameters())
        ]
        assert max(deltas) > 0.0

    def test_same_seed_identical(self):
        cfg = tiny_config(Task.EXPR, epochs=2)
        split = filter_split(
            generate_synthetic(8, 2, 10, Task.EXPR, image_size=16), Task.EXPR, cfg
        )
        sub_a, _ = train_subclassifier(split, 1, cfg)
        sub_b, _ = train_subclassifier(split, 1, cfg)
        for pa, pb in zip(sub_a.model.parameters(), sub_b.model.parameters()):
            assert float((pa - pb).detach().abs().max()) < 1e-6

    def test_augmentation_changes_training_but_stays_deterministic(self):
        base = tiny_config(Task.EXPR, epochs=2)
        augmented = tiny_config(Task.EXPR, epochs=2, augment=True)
        split = filter_split(
            generate_synthetic(8, 2, 10, Task.EXPR, image_size=16), Task.EXPR, base
        )
        plain, _ = train_subclassifier(split, 0, base)
        aug_a, _ = train_subclassifier(split, 0, augmented)
        aug_b, _ = train_subclassifier(split, 0, augmented)
        differs = max(
            float((p - q).detach().abs().max())
            for p, q in zip(plain.model.parameters(), aug_a.model.parameters())
        )
        assert differs > 0.0
        for pa, pb in zip(aug_a.model.parameters(), aug_b.model.parameters()):
            assert torch.equal(pa, pb)

    def test_empty_split_rejected(self):
        cfg = tiny_config(Task.EXPR)
        from conftest import make_split
        with pytest.raises(ConfigError):
            train_subclassifier(make_split({}), 0, cfg)


@pytest.fixture(scope="module")
def trained():
    cfg = tiny_config(Task.EXPR, epochs=4, learning_rate=3e-3)
    ens_split = filter_split(
        generate_synthetic(9, 2, 16, Task.EXPR, image_size=16), Task.EXPR, cfg
    )
    subs = [train_subclassifier(ens_split, k, cfg)[0] for k in range(3)]
    return cfg, ens_split, subs


class TestEnsemble:
    def test_single_model_passthrough(self, trained, rng):
        cfg, _, subs = trained
        images = rng.random((5, 16, 16, 3)).astype(np.float32)
        solo = predict_ensemble(subs[:1], images, cfg.expr_scheme, cfg.other_threshold)
        direct, _ = predict_sub(subs[0], images, cfg.expr_scheme, cfg.other_threshold)
        assert [e.final_class for e in solo] == direct.tolist()

    def test_agreement_wins(self, trained, rng):
        cfg, _, subs = trained
        images = rng.random((5, 16, 16, 3)).astype(np.float32)
        fused = predict_ensemble(subs, images, cfg.expr_scheme, cfg.other_threshold)
        for e in fused:
            if len(set(e.sub_decisions)) == 1:
                assert e.final_class == e.sub_decisions[0]

    def test_final_consistent_with_meta_vote(self, trained, rng):
        cfg, _, subs = trained
        images = rng.random((8, 16, 16, 3)).astype(np.float32)
        for e in predict_ensemble(subs, images, cfg.expr_scheme, cfg.other_threshold):
            assert e.final_class == meta_vote(list(e.sub_decisions), e.sub_probabilities)

    def test_empty_ensemble_rejected(self, rng):
        with pytest.raises(ConfigError):
            predict_ensemble([], rng.random((1, 16, 16, 3)).astype(np.float32),
                             ExprScheme.SEVEN_AS_CLASS, 0.5)
