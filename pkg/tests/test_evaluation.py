"""Decode/eval: exhaustive-enumeration decoding oracle, text normalization
and EM/F1 fixtures, report assembly, and the analysis breakdowns."""

import numpy as np
import pytest

from layervision.datapipe import QAExample, Window, tokens_to_text, window_example
from layervision.errors import AlignmentError, ContractError
from layervision.evaluation import (
    AnalysisReport,
    Candidate,
    ExamplePrediction,
    WindowPrediction,
    aggregate_windows,
    analyze,
    decode_probs,
    decode_window,
    em_f1,
    evaluate,
    evaluate_classification,
    normalize_answer,
)


def brute_force_decode(sp, ep, max_answer_len, lo=1, hi=None):
    """O(T^2) reference: enumerate candidates in tie-break order, track top 2."""
    hi = len(sp) if hi is None else hi
    cands = [(0, 0)]
    for i in range(lo, hi):
        for j in range(i, hi):
            if j - i < max_answer_len:
                cands.append((i, j))
    scored = [(sp[i] * ep[j], i, j) for i, j in cands]
    best = max(scored, key=lambda r: (r[0], -r[1], -r[2]))
    rest = [r for r in scored if (r[1], r[2]) != (best[1], best[2])]
    second = max(rest, key=lambda r: (r[0], -r[1], -r[2])) if rest else None
    return best, second


class TestDecodeWindow:
    def test_one_hot_logits(self):
        t = 12
        start = np.full(t, -40.0)
        end = np.full(t, -40.0)
        start[5] = 40.0
        end[7] = 40.0
        pred = decode_window(start, end, max_answer_len=30)
        assert (pred.best.start, pred.best.end) == (5, 7)
        assert pred.best.score == pytest.approx(1.0, abs=1e-6)

    def test_uniform_logits_tie_break_to_cls(self):
        pred = decode_window(np.zeros(8), np.zeros(8), max_answer_len=5)
        assert (pred.best.start, pred.best.end) == (0, 0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            t = int(rng.integers(2, 13))
            mal = int(rng.integers(1, 5))
            sl = rng.normal(size=t)
            el = rng.normal(size=t)
            pred = decode_window(sl, el, max_answer_len=mal)
            (bs, bi, bj), second = brute_force_decode(
                pred.start_probs, pred.end_probs, mal
            )
            assert (pred.best.start, pred.best.end) == (bi, bj)
            assert pred.best.score == pytest.approx(bs, rel=1e-12)
            if second is not None:
                ss, si, sj = second
                assert (pred.second_best.start, pred.second_best.end) == (si, sj)

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        sl = rng.normal(size=10)
        el = rng.normal(size=10)
        a = decode_window(sl, el, 5)
        b = decode_window(sl + 100.0, el - 3.5, 5)
        assert a.best.as_tuple()[:2] == b.best.as_tuple()[:2]
        assert a.best.score == pytest.approx(b.best.score, rel=1e-9)

    def test_context_range_restricts_candidates(self):
        sl = np.zeros(10)
        el = np.zeros(10)
        sl[2] = 50.0
        el[2] = 50.0
        pred = decode_window(sl, el, 5, context_lo=4, context_hi=9)
        # position 2 is outside the context range, so CLS wins
        assert (pred.best.start, pred.best.end) == (0, 0)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ContractError):
            decode_window(np.zeros(4), np.zeros(5), 3)

    def test_max_answer_len_limits_span(self):
        sl = np.full(10, -30.0)
        el = np.full(10, -30.0)
        sl[1] = 30.0
        el[6] = 30.0  # span (1, 6) has length 6 > max_answer_len 3
        pred = decode_window(sl, el, max_answer_len=3)
        assert pred.best.end - pred.best.start < 3


def make_window_pred(window, start_pos, end_pos, peak, t=12):
    sl = np.zeros(t)
    el = np.zeros(t)
    sl[start_pos] = peak
    el[end_pos] = peak
    return decode_window(sl, el, max_answer_len=6, window=window)


def toy_windows(n_windows=2, ex_id="ex0", q_len=3, ctx_len=30, answers=()):
    rng = np.random.default_rng(42)
    ex = QAExample(
        id=ex_id,
        question_tokens=[int(x) for x in rng.integers(500, 600, q_len)],
        context_tokens=[int(x) for x in rng.integers(600, 999, ctx_len)],
        answers=list(answers),
    )
    if n_windows == 1:
        return ex, window_example(ex, max_len=ctx_len + q_len + 3, overlap=0)
    wins = window_example(ex, max_len=q_len + 3 + 12, overlap=4)
    assert len(wins) >= n_windows
    return ex, wins[:n_windows]


class TestAggregateWindows:
    def test_single_window_passthrough(self):
        ex, (win,) = toy_windows(1)
        pred = make_window_pred(win, 6, 7, peak=9.0, t=len(win.token_ids))
        agg = aggregate_windows([pred])
        assert agg.example_id == ex.id
        assert agg.window_index == 0
        assert agg.score == pytest.approx(pred.best.score)
        assert agg.answer_text == tokens_to_text(win.token_ids[6:8])

    def test_higher_scoring_window_wins(self):
        _, wins = toy_windows(2)
        t0, t1 = len(wins[0].token_ids), len(wins[1].token_ids)
        weak = make_window_pred(wins[0], 6, 6, peak=2.0, t=t0)
        strong = make_window_pred(wins[1], 7, 8, peak=8.0, t=t1)
        agg = aggregate_windows([weak, strong])
        assert agg.window_index == wins[1].window_index
        assert agg.answer_text == tokens_to_text(wins[1].token_ids[7:9])

    def test_no_answer_winner_gives_empty_text(self):
        _, (win,) = toy_windows(1)
        t = len(win.token_ids)
        pred = decode_window(np.zeros(t), np.zeros(t), 5, window=win)
        agg = aggregate_windows([pred])
        assert agg.answer_text == ""
        assert agg.span is None

    def test_mixed_examples_rejected(self):
        _, (w0,) = toy_windows(1, ex_id="a")
        _, (w1,) = toy_windows(1, ex_id="b")
        p0 = make_window_pred(w0, 5, 5, 5.0, t=len(w0.token_ids))
        p1 = make_window_pred(w1, 5, 5, 5.0, t=len(w1.token_ids))
        with pytest.raises(AlignmentError):
            aggregate_windows([p0, p1])

    def test_empty_input_rejected(self):
        with pytest.raises(ContractError):
            aggregate_windows([])


class TestNormalize:
    def test_article_punctuation_case(self):
        assert normalize_answer("The Cat.") == "cat"

    def test_empty(self):
        assert normalize_answer("") == ""

    def test_article_and_whitespace(self):
        assert normalize_answer("an  apple") == "apple"


class TestEmF1:
    def test_partial_overlap(self):
        em, f1 = em_f1("a b c", ["b c d"])
        assert em == 0.0
        assert f1 == pytest.approx(2 / 3)

    def test_matched_no_answer(self):
        assert em_f1("", []) == (1.0, 1.0)

    def test_unmatched_no_answer(self):
        assert em_f1("something", []) == (0.0, 0.0)
        assert em_f1("", ["gold"]) == (0.0, 0.0)

    def test_case_and_articles_ignored_after_normalization(self):
        # normalization rules make these equal before scoring
        em, f1 = em_f1(
            normalize_answer("The Blue Whale"), [normalize_answer("blue whale")]
        )
        assert (em, f1) == (1.0, 1.0)

    def test_gold_order_symmetric_and_duplicates_harmless(self):
        golds = ["x y", "a b c"]
        a = em_f1("a b", golds)
        b = em_f1("a b", list(reversed(golds)))
        c = em_f1("a b", golds + ["x y"])
        assert a == b
        assert c >= a


def simple_pred(ex_id, text, second=None):
    return ExamplePrediction(
        example_id=ex_id,
        answer_text=text,
        score=1.0,
        window_index=0,
        second_text=second,
        second_score=0.5 if second is not None else None,
    )


def gold(ex_id, answer_text=None, ctx_len=10):
    answers = [(0, 1)] if answer_text else []
    return QAExample(
        id=ex_id,
        question_tokens=[1, 2],
        context_tokens=list(range(100, 100 + ctx_len)),
        answers=answers,
        gold_texts=[answer_text] if answer_text else [],
    )


class TestEvaluate:
    def test_all_exact(self):
        golds = [gold("a", "t100 t101"), gold("b")]
        preds = [simple_pred("a", "t100 t101"), simple_pred("b", "")]
        report = evaluate(preds, golds)
        assert report.em == 1.0 and report.f1 == 1.0
        assert report.has_answer_correct == 1
        assert report.no_answer_correct == 1

    def test_half_correct_no_answer(self):
        golds = [gold(f"g{i}") for i in range(4)]
        preds = [
            simple_pred("g0", ""),
            simple_pred("g1", ""),
            simple_pred("g2", "wrong"),
            simple_pred("g3", "wrong"),
        ]
        report = evaluate(preds, golds)
        assert report.em == 0.5

    def test_hand_scored_mixed_fixture(self):
        golds = [
            gold("e1", "t1 t2"),
            gold("e2", "t3"),
            gold("e3"),
            gold("e4", "t9 t8 t7"),
            gold("e5"),
        ]
        preds = [
            simple_pred("e1", "t1 t2"),   # em 1, f1 1
            simple_pred("e2", "t3 t4"),   # em 0, f1 2/3
            simple_pred("e3", ""),        # em 1, f1 1
            simple_pred("e4", "t7"),      # em 0, f1 2/4 = 0.5
            simple_pred("e5", "t0"),      # em 0, f1 0
        ]
        report = evaluate(preds, golds)
        assert report.em == pytest.approx(2 / 5)
        assert report.f1 == pytest.approx((1 + 2 / 3 + 1 + 0.5 + 0) / 5)
        assert report.has_answer_total == 3
        assert report.no_answer_total == 2
        assert report.em == pytest.approx(
            sum(em_f1(p.answer_text, g.gold_texts)[0] for p, g in zip(preds, golds)) / 5
        )

    def test_missing_id_rejected(self):
        with pytest.raises(AlignmentError):
            evaluate([simple_pred("a", "")], [gold("a"), gold("b")])

    def test_duplicate_pred_rejected(self):
        with pytest.raises(AlignmentError):
            evaluate([simple_pred("a", ""), simple_pred("a", "")], [gold("a")])


class TestAnalyze:
    def test_identical_comparison_has_empty_unique_sets(self):
        golds = [gold("a", "t100 t101"), gold("b")]
        preds = [simple_pred("a", "t100 t101"), simple_pred("b", "")]
        report = analyze(preds, golds, comparison_preds=preds)
        assert report.mean_context_tokens_uniquely_correct is None
        assert report.mean_context_tokens_uniquely_correct_comparison is None
        assert report.mean_context_tokens_correct is not None

    def test_second_best_rate_fixture(self):
        # 4 examples: 2 correct, 2 wrong; of the wrong, one has a correct
        # second-best answer -> rate 0.5
        golds = [
            gold("a", "t1"),
            gold("b", "t2"),
            gold("c", "t3"),
            gold("d", "t4"),
        ]
        preds = [
            simple_pred("a", "t1"),
            simple_pred("b", "t2"),
            simple_pred("c", "zzz", second="t3"),
            simple_pred("d", "zzz", second="nope"),
        ]
        report = analyze(preds, golds)
        assert report.second_best_correct_rate == pytest.approx(0.5)

    def test_all_no_answer(self):
        golds = [gold("a"), gold("b")]
        preds = [simple_pred("a", ""), simple_pred("b", "")]
        report = analyze(preds, golds)
        assert report.no_answer_accuracy == 1.0
        assert report.has_answer_accuracy is None
        assert report.wrong_has_answer_said_no_answer is None

    def test_wrong_has_answer_said_no_answer_share(self):
        golds = [gold("a", "t1"), gold("b", "t2"), gold("c", "t3"), gold("d")]
        preds = [
            simple_pred("a", ""),      # wrong has-answer, said no answer
            simple_pred("b", "zzz"),   # wrong has-answer, said wrong span
            simple_pred("c", "t3"),    # correct
            simple_pred("d", ""),      # correct no-answer
        ]
        report = analyze(preds, golds)
        assert report.wrong_has_answer_said_no_answer == pytest.approx(0.5)

    def test_unique_context_length_means(self):
        golds = [gold("a", "t1", ctx_len=10), gold("b", "t2", ctx_len=30)]
        ours = [simple_pred("a", "t1"), simple_pred("b", "zzz")]
        theirs = [simple_pred("a", "zzz"), simple_pred("b", "t2")]
        report = analyze(ours, golds, comparison_preds=theirs)
        assert report.mean_context_tokens_uniquely_correct == pytest.approx(10.0)
        assert report.mean_context_tokens_uniquely_correct_comparison == pytest.approx(30.0)

    def test_csv_rows_cover_all_fields(self):
        golds = [gold("a")]
        preds = [simple_pred("a", "")]
        report = analyze(preds, golds)
        rows = report.to_csv_rows()
        assert ("n_examples", "1") in rows
        assert len(rows) == len(report.to_dict())


class TestClassificationMetrics:
    def test_accuracy_and_f1(self):
        logits = np.array([2.0, -1.0, 0.5, -0.5])
        labels = np.array([1, 0, 0, 1])
        report = evaluate_classification(logits, labels)
        assert report.em == pytest.approx(0.5)  # 2 of 4 right
        # tp=1, fp=1, fn=1 -> f1 = 2/(2+1+1)
        assert report.f1 == pytest.approx(0.5)

    def test_perfect(self):
        report = evaluate_classification(np.array([3.0, -3.0]), np.array([1, 0]))
        assert report.em == 1.0 and report.f1 == 1.0
