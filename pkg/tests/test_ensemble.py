"""Ensemble max rule: brute-force equivalence, algebraic properties, and
combined-window decoding."""

import numpy as np
import pytest
from scipy.special import softmax

from layervision.datapipe import QAExample, window_example
from layervision.ensemble import combine_max, ensemble_argmax, ensemble_decode
from layervision.errors import AlignmentError, ContractError
from layervision.evaluation import decode_window


def rand_probs(rng, t=10):
    return softmax(rng.normal(size=t))


def brute_force_two_member(z, y):
    # the two-member rule, written out literally
    combined = [max(z[i], y[i]) for i in range(len(z))]
    best = 0
    for i in range(1, len(combined)):
        if combined[i] > combined[best]:
            best = i
    return best


class TestEnsembleArgmax:
    def test_idempotent_on_identical_members(self):
        rng = np.random.default_rng(0)
        z = rand_probs(rng)
        assert ensemble_argmax([z, z]) == int(np.argmax(z))

    def test_one_hot_tie_breaks_to_smaller_index(self):
        z = np.zeros(10)
        z[2] = 1.0
        y = np.zeros(10)
        y[7] = 1.0
        assert ensemble_argmax([z, y]) == 2

    def test_matches_literal_rule_on_1000_pairs(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            z = rand_probs(rng)
            y = rand_probs(rng)
            assert ensemble_argmax([z, y]) == brute_force_two_member(z, y)

    def test_commutative_associative_idempotent(self):
        rng = np.random.default_rng(2)
        a, b, c = (rand_probs(rng) for _ in range(3))
        assert ensemble_argmax([a, b, c]) == ensemble_argmax([c, a, b])
        # folding max pairwise in either grouping gives the same vector
        np.testing.assert_array_equal(
            combine_max([a, b, c]), np.maximum(np.maximum(a, b), c)
        )
        np.testing.assert_array_equal(
            combine_max([a, b, c]), np.maximum(a, np.maximum(b, c))
        )
        assert ensemble_argmax([a, b]) == ensemble_argmax([a, b, b])

    def test_rejects_single_member(self):
        with pytest.raises(ContractError):
            ensemble_argmax([np.ones(4) / 4])

    def test_rejects_length_mismatch(self):
        with pytest.raises(ContractError):
            ensemble_argmax([np.ones(4) / 4, np.ones(5) / 5])

    def test_rejects_non_probability_input(self):
        with pytest.raises(ContractError):
            ensemble_argmax([np.ones(4), np.ones(4) / 4])

    def test_combined_vector_needs_no_renormalization(self):
        rng = np.random.default_rng(3)
        z, y = rand_probs(rng), rand_probs(rng)
        combined = combine_max([z, y])
        assert combined.sum() >= 1.0  # max never loses mass
        assert int(np.argmax(combined)) == ensemble_argmax([z, y])


def one_window_example(ex_id="ex0"):
    ex = QAExample(
        id=ex_id,
        question_tokens=[11, 12, 13],
        context_tokens=list(range(700, 720)),
        answers=[(4, 6)],
        gold_texts=["t704 t705 t706"],
    )
    (win,) = window_example(ex, max_len=30, overlap=0)
    return ex, win


def window_pred_with_peak(win, start_pos, end_pos, peak):
    t = len(win.token_ids)
    sl = np.zeros(t)
    el = np.zeros(t)
    sl[start_pos] = peak
    el[end_pos] = peak
    return decode_window(sl, el, max_answer_len=10, window=win)


class TestEnsembleDecode:
    def test_identical_models_match_single_model(self):
        _, win = one_window_example()
        pred = window_pred_with_peak(win, 9, 11, peak=6.0)
        single = pred.best
        combined = ensemble_decode([[pred], [pred]])
        assert combined.window_index == win.window_index
        assert combined.span is not None
        # same span as either model alone
        assert (single.start, single.end) == (
            combined.span[0] + win.context_start - win.context_offset,
            combined.span[1] + win.context_start - win.context_offset,
        )

    def test_confident_model_dominates_uniform_one(self):
        _, win = one_window_example()
        confident = window_pred_with_peak(win, 9, 11, peak=9.0)
        t = len(win.token_ids)
        uniform = decode_window(np.zeros(t), np.zeros(t), 10, window=win)
        combined = ensemble_decode([[confident], [uniform]])
        alone = ensemble_decode([[confident], [confident]])
        assert combined.answer_text == alone.answer_text
        assert combined.answer_text != ""

    def test_complementary_models_cover_both_halves(self):
        # model A decodes example 0 confidently, model B example 1; their
        # confident positions don't collide, so the ensemble gets both.
        results = {}
        for ex_id, a_peak, b_peak in (("e0", 8.0, 0.0), ("e1", 0.0, 8.0)):
            _, win = one_window_example(ex_id)
            a = window_pred_with_peak(win, 9, 11, peak=a_peak)
            b = window_pred_with_peak(win, 9, 11, peak=b_peak)
            results[ex_id] = ensemble_decode([[a], [b]])
        for ex_id, pred in results.items():
            assert pred.answer_text != "", ex_id
            assert pred.span == (4, 6)

    def test_misaligned_windows_rejected(self):
        ex, win = one_window_example()
        other_ex = QAExample(
            id=ex.id,
            question_tokens=[11, 12, 13],
            context_tokens=list(range(700, 740)),
            answers=[],
        )
        win_a = window_example(other_ex, max_len=20, overlap=3)  # multiple windows
        pred_a = [window_pred_with_peak(w, 6, 6, 1.0) for w in win_a]
        pred_b = [window_pred_with_peak(win, 6, 6, 1.0)]
        with pytest.raises(AlignmentError):
            ensemble_decode([pred_a, pred_b])
