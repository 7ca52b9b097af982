# test_losses.py
"""
TriggerTune - Loss Tests
CTC against brute-force alignment enumeration, cross-entropies, pair mining and the metric loss
"""
import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from models.config import LossWeights
from utils.ctc import (
    ctc_forward, ctc_keyword_score, ctc_keyword_scores, ctc_loss, greedy_decode, phoneme_accuracy, required_frames,
)
from utils.errors import UnalignableLabelsError, ZeroNormEmbeddingError
from utils.losses import (
    EPS, PairSets, build_pairs, cosine, metric_loss, phrase_ce, similarity, speaker_ce, subsample_negatives,
    total_loss,
)


def collapse(path, blank):
    out, previous = [], None
    for symbol in path:
        if symbol != previous and symbol != blank:
            out.append(symbol)
        previous = symbol
    return out


def brute_force_ctc(log_posteriors: np.ndarray, labels, blank: int) -> float:
    """-log of the summed probability of every frame path collapsing onto the labels"""
    T, C = log_posteriors.shape
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == list(labels):
            total += math.exp(sum(log_posteriors[t, s] for t, s in enumerate(path)))
    return -math.log(total) if total > 0 else math.inf


def random_log_posteriors(rng, T, C):
    return np.log(rng.dirichlet(np.ones(C), size=T))


class TestCtcOracle:
    def test_forward_matches_alignment_enumeration(self):
        rng = np.random.default_rng(0)
        checked = 0
        while checked < 1000:
            T = int(rng.integers(1, 6))
            V = int(rng.integers(1, 4))
            blank = V
            labels = rng.integers(0, V, size=int(rng.integers(0, 4))).tolist()
            if required_frames(labels) > T:
                continue
            lp = random_log_posteriors(rng, T, V + 1)
            expected = brute_force_ctc(lp, labels, blank)
            got = float(ctc_loss(torch.tensor(lp), labels, blank))
            assert abs(got - expected) < 1e-8, (T, V, labels)
            checked += 1

    def test_batched_forward_with_padding_matches_single(self):
        rng = np.random.default_rng(1)
        lps = [torch.tensor(random_log_posteriors(rng, T, 4)) for T in (5, 3, 4)]
        labels = [[0, 1, 1], [2], [0, 2]]
        padded = torch.zeros(3, 5, 4)
        for i, lp in enumerate(lps):
            padded[i, : lp.shape[0]] = lp
        batched = ctc_forward(padded, torch.tensor([5, 3, 4]), labels, blank=3)
        for i, lp in enumerate(lps):
            assert float(batched[i]) == pytest.approx(float(ctc_loss(lp, labels[i], 3)), abs=1e-12)

    def test_matches_torch_ctc_loss(self):
        rng = np.random.default_rng(2)
        lp = torch.tensor(random_log_posteriors(rng, 12, 6))
        labels = [1, 2, 2, 4]
        ours = float(ctc_loss(lp, labels, blank=5))
        reference = F.ctc_loss(
            lp[:, None, :], torch.tensor([labels]), torch.tensor([12]), torch.tensor([4]),
            blank=5, reduction="sum",
        )
        assert ours == pytest.approx(float(reference), abs=1e-9)

    def test_gradient_flows_through_log_posteriors(self):
        logits = torch.randn(6, 4, requires_grad=True)
        loss = ctc_loss(torch.log_softmax(logits, dim=-1), [0, 1], blank=3)
        loss.backward()
        assert torch.all(torch.isfinite(logits.grad))
        assert logits.grad.abs().sum() > 0

    def test_unalignable_labels_raise(self):
        lp = torch.log_softmax(torch.randn(3, 3), dim=-1)
        with pytest.raises(UnalignableLabelsError) as info:
            ctc_loss(lp, [1, 1, 0], blank=2)
        assert info.value.required_frames == 4
        assert info.value.frames == 3

    def test_empty_labels_is_all_blank_path(self):
        lp = torch.log_softmax(torch.randn(4, 3), dim=-1)
        assert float(ctc_loss(lp, [], blank=2)) == pytest.approx(-float(lp[:, 2].sum()), abs=1e-12)

    def test_blank_label_is_rejected(self):
        with pytest.raises(ValueError):
            ctc_loss(torch.log_softmax(torch.randn(4, 3), dim=-1), [2], blank=2)

    def test_required_frames_counts_repeats(self):
        assert required_frames([]) == 0
        assert required_frames([1, 2, 3]) == 3
        assert required_frames([1, 1, 2, 2]) == 6


class TestKeywordScoring:
    def test_score_is_negative_loss_per_frame(self):
        lp = torch.log_softmax(torch.randn(8, 4), dim=-1)
        assert ctc_keyword_score(lp, [0, 1], 3) == pytest.approx(-float(ctc_loss(lp, [0, 1], 3)) / 8, abs=1e-12)

    def test_unalignable_keyword_scores_minus_infinity(self):
        lp = torch.log_softmax(torch.randn(2, 4), dim=-1)
        assert ctc_keyword_score(lp, [0, 1, 2], 3) == float("-inf")

    def test_batched_scores_match(self):
        lp = torch.log_softmax(torch.randn(2, 6, 4), dim=-1)
        scores = ctc_keyword_scores(lp, torch.tensor([6, 5]), [0, 1], 3)
        assert float(scores[1]) == pytest.approx(ctc_keyword_score(lp[1, :5], [0, 1], 3), abs=1e-12)

    def test_greedy_decode_collapses_and_drops_blanks(self):
        best = [0, 0, 3, 0, 1, 1, 3, 3, 2]
        lp = torch.full((len(best), 4), -10.0)
        lp[torch.arange(len(best)), torch.tensor(best)] = 0.0
        assert greedy_decode(lp, blank=3) == [0, 0, 1, 2]

    def test_phoneme_accuracy(self):
        assert phoneme_accuracy([[0, 1, 2]], [[0, 1, 2]]) == 1.0
        assert phoneme_accuracy([[0, 1]], [[0, 1, 2, 3]]) == pytest.approx(2 * 2 / 6)
        assert phoneme_accuracy([], []) == 0.0


class TestCrossEntropies:
    def test_phrase_ce_at_zero_logit_is_ln2(self):
        assert float(phrase_ce(torch.tensor(0.0), 1)) == pytest.approx(math.log(2.0), abs=1e-15)
        assert float(phrase_ce(torch.tensor(0.0), 0)) == pytest.approx(math.log(2.0), abs=1e-15)

    def test_phrase_ce_is_stable_for_large_logits(self):
        assert float(phrase_ce(torch.tensor(1000.0), 1)) == pytest.approx(0.0, abs=1e-12)
        assert float(phrase_ce(torch.tensor(-1000.0), 1)) == pytest.approx(1000.0)

    def test_speaker_ce_uniform_logits(self):
        assert float(speaker_ce(torch.zeros(5), 2)) == pytest.approx(math.log(5.0), abs=1e-12)

    def test_speaker_ce_matches_log_softmax(self):
        logits = torch.randn(5, 7, generator=torch.Generator().manual_seed(2))
        targets = [0, 3, 6, 3, 1]
        expected = -sum(
            float(logits[i, t] - torch.logsumexp(logits[i], dim=0)) for i, t in enumerate(targets)
        ) / len(targets)
        assert float(speaker_ce(logits, targets)) == pytest.approx(expected, abs=1e-12)

    def test_speaker_index_out_of_range(self):
        with pytest.raises(IndexError):
            speaker_ce(torch.zeros(5), 5)
        with pytest.raises(IndexError):
            speaker_ce(torch.zeros(2, 3), [0, -1])


class TestPairs:
    def test_pair_rules(self):
        # utterances: a+ a+ a- b+ b-
        pairs = build_pairs(["a", "a", "a", "b", "b"], [1, 1, 0, 1, 0])
        positives, negatives = pairs.as_sets()
        assert positives == {(0, 1)}
        # same-speaker opposite labels plus every cross-speaker pair
        assert negatives == {(0, 2), (1, 2), (3, 4), (0, 3), (0, 4), (1, 3), (1, 4), (2, 3), (2, 4)}

    def test_same_speaker_both_negative_is_excluded(self):
        pairs = build_pairs(["a", "a"], [0, 0])
        assert pairs.n_pos == 0 and pairs.n_neg == 0

    def test_strict_drops_cross_speaker_double_negatives(self):
        loose = build_pairs(["a", "b"], [0, 0])
        strict = build_pairs(["a", "b"], [0, 0], strict=True)
        assert loose.n_neg == 1 and strict.n_neg == 0

    def test_unknown_speakers_never_form_positives(self):
        pairs = build_pairs([None, None, "a"], [1, 1, 1])
        assert pairs.n_pos == 0
        assert pairs.n_neg == 3

    def test_full_size_batch_positive_count(self):
        # 28 speakers x 4 keyword utterances plus 16 anonymous voice-trigger utterances
        speakers = [f"s{k}" for k in range(28) for _ in range(4)] + [None] * 16
        pairs = build_pairs(speakers, [1] * len(speakers))
        assert pairs.n_pos == 28 * 6 == 168

    def test_pairs_do_not_depend_on_batch_order(self):
        rng = np.random.default_rng(3)
        speakers = ["a", "a", "a", "b", "b", None, "c", None]
        labels = [1, 1, 0, 1, 0, 1, 1, 0]
        perm = rng.permutation(len(speakers))
        shuffled = build_pairs([speakers[k] for k in perm], [labels[k] for k in perm])

        def original(pair_set):
            return {tuple(sorted((int(perm[i]), int(perm[j])))) for i, j in pair_set}

        reference = build_pairs(speakers, labels)
        assert original(shuffled.positives) == set(reference.positives)
        assert original(shuffled.negatives) == set(reference.negatives)

    def test_subsampling_balances_negatives(self):
        pairs = build_pairs(["a"] * 4 + ["b"] * 4, [1] * 8)
        balanced = subsample_negatives(pairs, np.random.default_rng(0))
        assert balanced.n_pos == pairs.n_pos == 12
        assert balanced.n_neg == 12
        assert set(balanced.negatives) <= set(pairs.negatives)

    def test_subsampling_keeps_scarce_negatives(self):
        pairs = PairSets(positives=((0, 1), (0, 2)), negatives=((1, 2),))
        assert subsample_negatives(pairs, np.random.default_rng(0)) == pairs


class TestSimilarity:
    @pytest.mark.parametrize("cos,expected", [(1.0, 1.0 - EPS), (0.0, 0.5), (-1.0, EPS)])
    def test_fixed_points(self, cos, expected):
        e_i = torch.tensor([1.0, 0.0])
        e_j = torch.tensor([cos, math.sqrt(max(0.0, 1.0 - cos * cos))])
        assert float(similarity(e_i, e_j, 1.0, 0.0)) == expected

    def test_zero_norm_embedding(self):
        with pytest.raises(ZeroNormEmbeddingError):
            cosine(torch.zeros(3), torch.ones(3))

    def test_scale_is_invariant(self):
        e_i, e_j = torch.randn(6), torch.randn(6)
        assert float(cosine(3.0 * e_i, e_j)) == pytest.approx(float(cosine(e_i, e_j)), abs=1e-12)


class TestMetricLoss:
    def test_hand_example(self):
        # P = 0.8 for the positive pair, P = 0.3 for the negative pair
        embeddings = torch.tensor([[1.0, 0.0], [0.6, 0.8], [-0.4, math.sqrt(1 - 0.16)]])
        pairs = PairSets(positives=((0, 1),), negatives=((0, 2),))
        loss = float(metric_loss(embeddings, pairs, 1.0, 0.0))
        assert loss == pytest.approx(-math.log(0.8) - math.log(0.7), abs=1e-12)
        assert loss == pytest.approx(0.5798, abs=1e-4)

    def test_empty_sets_contribute_zero(self):
        embeddings = torch.randn(3, 4)
        assert float(metric_loss(embeddings, PairSets(), 1.0, 0.0)) == 0.0
        only_pos = PairSets(positives=((0, 1),))
        p = float(similarity(embeddings[0], embeddings[1], 1.0, 0.0))
        assert float(metric_loss(embeddings, only_pos, 1.0, 0.0)) == pytest.approx(-math.log(p), abs=1e-12)

    def test_swapping_pair_members_keeps_the_loss(self):
        embeddings = torch.randn(5, 4, generator=torch.Generator().manual_seed(8))
        pairs = build_pairs(["x", "x", "y", "y", "z"], [1, 1, 1, 0, 1])
        swapped = PairSets(
            positives=tuple((j, i) for i, j in pairs.positives),
            negatives=tuple((j, i) for i, j in pairs.negatives),
        )
        forward = float(metric_loss(embeddings, pairs, 1.3, -0.2))
        assert float(metric_loss(embeddings, swapped, 1.3, -0.2)) == pytest.approx(forward, abs=1e-12)

    def test_gradients_reach_scale_and_offset(self):
        a = torch.tensor(1.0, requires_grad=True)
        b = torch.tensor(0.0, requires_grad=True)
        embeddings = torch.randn(4, 3)
        pairs = build_pairs(["x", "x", "y", "y"], [1, 1, 1, 1])
        metric_loss(embeddings, pairs, a, b).backward()
        assert a.grad is not None and b.grad is not None


class TestTotalLoss:
    def test_weighted_sum(self):
        breakdown = total_loss(1.0, 2.0, 3.0, 4.0, LossWeights(alpha=1.0, beta=1.0, gamma=0.1))
        assert float(breakdown.total) == pytest.approx(6.4, abs=1e-12)

    def test_inactive_terms_are_zeroed(self):
        breakdown = total_loss(1.0, 2.0, 3.0, 4.0, active={"phrase", "metric"})
        assert float(breakdown.phone) == 0.0
        assert float(breakdown.spkr) == 0.0
        assert float(breakdown.total) == pytest.approx(2.0 + 0.4, abs=1e-12)

    def test_unknown_term(self):
        with pytest.raises(ValueError):
            total_loss(0.0, 0.0, 0.0, 0.0, active={"phone", "energy"})
