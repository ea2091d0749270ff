"""Span decoding, per-example aggregation over windows, EM/F1 scoring and
the answer-type / second-best / context-length analyses.

Decoding enumerates candidate spans (i, j) with i <= j and
j - i < max_answer_len over the window's context positions, plus the
(0, 0) "no answer" candidate, and scores each by
start_prob[i] * end_prob[j].  No null-score threshold is applied: the
raw softmax probabilities decide.  Ties break toward smaller (i, j).
"""

from __future__ import annotations

import collections
import re
import string
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax as _softmax

from .datapipe import Window, tokens_to_text
from .errors import AlignmentError, ContractError, DimensionError

DEFAULT_MAX_ANSWER_LEN = 30


@dataclass(frozen=True)
class Candidate:
    start: int
    end: int
    score: float

    def as_tuple(self) -> tuple[int, int, float]:
        return self.start, self.end, self.score


@dataclass
class WindowPrediction:
    """Decoded candidates for one window."""

    start_probs: np.ndarray
    end_probs: np.ndarray
    best: Candidate
    no_answer_score: float
    second_best: Optional[Candidate] = None
    window: Optional[Window] = None


@dataclass
class ExamplePrediction:
    """Final answer for one example after cross-window aggregation."""

    example_id: str
    answer_text: str  # "" means "no answer"
    score: float
    window_index: int
    span: Optional[tuple[int, int]] = None  # context coordinates
    second_text: Optional[str] = None
    second_score: Optional[float] = None

    def to_json(self) -> dict:
        return {
            "example_id": self.example_id,
            "text": self.answer_text,
            "score": self.score,
            "window_index": self.window_index,
            "span": list(self.span) if self.span else None,
            "second_best": (
                {"text": self.second_text, "score": self.second_score}
                if self.second_text is not None
                else None
            ),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExamplePrediction":
        second = d.get("second_best")
        return cls(
            example_id=d["example_id"],
            answer_text=d["text"],
            score=d["score"],
            window_index=d.get("window_index", 0),
            span=tuple(d["span"]) if d.get("span") else None,
            second_text=second["text"] if second else None,
            second_score=second["score"] if second else None,
        )


def _candidate_order(scores, starts, ends):
    """Indices sorted by (-score, start, end); stable and deterministic."""
    return np.lexsort((ends, starts, -np.asarray(scores)))


def decode_probs(
    start_probs: np.ndarray,
    end_probs: np.ndarray,
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
    context_lo: int = 1,
    context_hi: Optional[int] = None,
) -> tuple[Candidate, Optional[Candidate], float]:
    """Rank span candidates on probability vectors (already softmaxed).

    Returns (best, second_best, no_answer_score).  Used directly by the
    ensemble path, where combined max-vectors are deliberately not
    renormalized.
    """
    sp = np.asarray(start_probs, dtype=np.float64)
    ep = np.asarray(end_probs, dtype=np.float64)
    if sp.shape != ep.shape or sp.ndim != 1:
        raise ContractError(
            f"start/end probability shapes differ: {sp.shape} vs {ep.shape}"
        )
    if max_answer_len < 1:
        raise ContractError(f"max_answer_len must be >= 1, got {max_answer_len}")
    t = sp.shape[0]
    hi = t if context_hi is None else min(context_hi, t)
    lo = max(context_lo, 1)

    starts = [0]
    ends = [0]
    scores = [float(sp[0] * ep[0])]
    if hi > lo:
        i_idx, j_idx = np.meshgrid(np.arange(lo, hi), np.arange(lo, hi), indexing="ij")
        mask = (j_idx >= i_idx) & (j_idx - i_idx < max_answer_len)
        i_sel = i_idx[mask]
        j_sel = j_idx[mask]
        starts.extend(i_sel.tolist())
        ends.extend(j_sel.tolist())
        scores.extend((sp[i_sel] * ep[j_sel]).tolist())

    order = _candidate_order(scores, starts, ends)
    best_k = order[0]
    best = Candidate(int(starts[best_k]), int(ends[best_k]), float(scores[best_k]))
    second = None
    if len(order) > 1:
        k = order[1]
        second = Candidate(int(starts[k]), int(ends[k]), float(scores[k]))
    return best, second, float(sp[0] * ep[0])


def decode_window(
    start_logits: np.ndarray,
    end_logits: np.ndarray,
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
    window: Optional[Window] = None,
    context_lo: int = 1,
    context_hi: Optional[int] = None,
) -> WindowPrediction:
    """Softmax the logits and rank span candidates for one window.

    When a window is given, candidates are restricted to its context
    positions; otherwise to [context_lo, context_hi) (default: every
    non-CLS position).
    """
    sl = np.asarray(start_logits, dtype=np.float64)
    el = np.asarray(end_logits, dtype=np.float64)
    if sl.shape != el.shape or sl.ndim != 1:
        raise ContractError(
            f"start/end logit shapes differ: {sl.shape} vs {el.shape}"
        )
    if window is not None:
        context_lo, context_hi = window.context_positions()
    sp = _softmax(sl)
    ep = _softmax(el)
    best, second, no_answer = decode_probs(
        sp, ep, max_answer_len, context_lo=context_lo, context_hi=context_hi
    )
    return WindowPrediction(
        start_probs=sp,
        end_probs=ep,
        best=best,
        no_answer_score=no_answer,
        second_best=second,
        window=window,
    )


def _candidate_text(window: Window, cand: Candidate) -> tuple[str, Optional[tuple[int, int]]]:
    if (cand.start, cand.end) == (0, 0):
        return "", None
    tokens = window.token_ids[cand.start : cand.end + 1]
    return tokens_to_text(tokens), window.to_context_span(cand.start, cand.end)


def aggregate_windows(preds: Sequence[WindowPrediction]) -> ExamplePrediction:
    """Pick the best candidate across every window of one example.

    The per-window winners (and runners-up) compete on raw score; the
    global runner-up becomes the example's second-most-likely answer.
    """
    if not preds:
        raise ContractError("aggregate_windows needs at least one window")
    for p in preds:
        if p.window is None:
            raise ContractError("window metadata required for aggregation")
    example_id = preds[0].window.example_id
    if any(p.window.example_id != example_id for p in preds):
        raise AlignmentError("aggregate_windows got windows from different examples")

    pool = []  # (score, window_order, start, end, pred, candidate)
    for order, p in enumerate(preds):
        for cand in filter(None, (p.best, p.second_best)):
            pool.append((cand.score, order, cand.start, cand.end, p, cand))
    pool.sort(key=lambda row: (-row[0], row[1], row[2], row[3]))

    _, order, _, _, win_pred, cand = pool[0]
    text, span = _candidate_text(win_pred.window, cand)
    result = ExamplePrediction(
        example_id=example_id,
        answer_text=text,
        score=cand.score,
        window_index=win_pred.window.window_index,
        span=span,
    )
    if len(pool) > 1:
        _, _, _, _, p2, c2 = pool[1]
        second_text, _ = _candidate_text(p2.window, c2)
        result.second_text = second_text
        result.second_score = c2.score
    return result


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation and articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def em_f1(pred_text: str, gold_texts: Sequence[str]) -> tuple[float, float]:
    """Exact-match and token-F1 over whitespace tokens, maximized over golds.

    Texts are compared exactly as given; the evaluation pipeline passes
    them through `normalize_answer` first (keeping the scorer itself a
    pure token-multiset comparison).  An empty gold list is the
    "no answer" gold: both scores are 1 iff the prediction is empty.
    """
    golds = list(gold_texts) if gold_texts else [""]
    pred_toks = pred_text.split()
    best_em = 0.0
    best_f1 = 0.0
    for gold in golds:
        gold_toks = gold.split()
        em = float(gold_toks == pred_toks)
        if not gold_toks or not pred_toks:
            f1 = float(gold_toks == pred_toks)
        else:
            common = collections.Counter(gold_toks) & collections.Counter(pred_toks)
            same = sum(common.values())
            if same == 0:
                f1 = 0.0
            else:
                precision = same / len(pred_toks)
                recall = same / len(gold_toks)
                f1 = 2 * precision * recall / (precision + recall)
        best_em = max(best_em, em)
        best_f1 = max(best_f1, f1)
    return best_em, best_f1


def scored_em_f1(pred_text: str, gold_texts: Sequence[str]) -> tuple[float, float]:
    """em_f1 over normalized texts: what the evaluation pipeline uses."""
    return em_f1(normalize_answer(pred_text), [normalize_answer(g) for g in gold_texts])


@dataclass
class MetricsReport:
    em: float
    f1: float
    n_examples: int
    has_answer_correct: int = 0
    has_answer_total: int = 0
    no_answer_correct: int = 0
    no_answer_total: int = 0

    def to_dict(self) -> dict:
        return {
            "em": self.em,
            "f1": self.f1,
            "n_examples": self.n_examples,
            "has_answer": {
                "correct": self.has_answer_correct,
                "total": self.has_answer_total,
            },
            "no_answer": {
                "correct": self.no_answer_correct,
                "total": self.no_answer_total,
            },
        }


def _align(preds, examples):
    by_id = {}
    for p in preds:
        if p.example_id in by_id:
            raise AlignmentError(f"duplicate prediction for {p.example_id!r}")
        by_id[p.example_id] = p
    gold_ids = [ex.id for ex in examples]
    if len(set(gold_ids)) != len(gold_ids):
        raise AlignmentError("duplicate gold example ids")
    missing = set(gold_ids) - set(by_id)
    extra = set(by_id) - set(gold_ids)
    if missing or extra:
        raise AlignmentError(
            f"prediction/gold mismatch: missing={sorted(missing)[:3]} "
            f"extra={sorted(extra)[:3]}"
        )
    return [(by_id[ex.id], ex) for ex in examples]


def evaluate(preds, examples) -> MetricsReport:
    """Mean EM/F1 plus the has/no-answer correctness split."""
    pairs = _align(preds, examples)
    if not pairs:
        raise ContractError("evaluate needs at least one example")
    ems, f1s = [], []
    report = MetricsReport(em=0.0, f1=0.0, n_examples=len(pairs))
    for pred, ex in pairs:
        em, f1 = scored_em_f1(pred.answer_text, ex.gold_texts)
        ems.append(em)
        f1s.append(f1)
        if ex.has_answer:
            report.has_answer_total += 1
            report.has_answer_correct += int(em == 1.0)
        else:
            report.no_answer_total += 1
            report.no_answer_correct += int(em == 1.0)
    report.em = float(np.mean(ems))
    report.f1 = float(np.mean(f1s))
    return report


@dataclass
class AnalysisReport:
    """Answer-type, second-best and context-length breakdowns."""

    n_examples: int
    has_answer_accuracy: Optional[float]
    no_answer_accuracy: Optional[float]
    wrong_has_answer_said_no_answer: Optional[float]
    second_best_correct_rate: Optional[float]
    mean_context_tokens_correct: Optional[float]
    mean_context_tokens_correct_comparison: Optional[float] = None
    mean_context_tokens_uniquely_correct: Optional[float] = None
    mean_context_tokens_uniquely_correct_comparison: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "n_examples": self.n_examples,
            "has_answer_accuracy": self.has_answer_accuracy,
            "no_answer_accuracy": self.no_answer_accuracy,
            "wrong_has_answer_said_no_answer": self.wrong_has_answer_said_no_answer,
            "second_best_correct_rate": self.second_best_correct_rate,
            "mean_context_tokens_correct": self.mean_context_tokens_correct,
            "mean_context_tokens_correct_comparison": self.mean_context_tokens_correct_comparison,
            "mean_context_tokens_uniquely_correct": self.mean_context_tokens_uniquely_correct,
            "mean_context_tokens_uniquely_correct_comparison": self.mean_context_tokens_uniquely_correct_comparison,
        }

    def to_csv_rows(self) -> list[tuple[str, str]]:
        rows = []
        for key, value in self.to_dict().items():
            rows.append((key, "" if value is None else f"{value}"))
        return rows


def _mean_or_none(values) -> Optional[float]:
    values = list(values)
    return float(np.mean(values)) if values else None


def analyze(preds, examples, comparison_preds=None) -> AnalysisReport:
    """The model-behaviour breakdowns (see AnalysisReport fields).

    "Correct" means EM == 1 against the gold answers.  Context length is
    the gold example's context token count; the uniquely-correct means
    compare this model against `comparison_preds` when given.
    """
    pairs = _align(preds, examples)
    em_by_id = {}
    for pred, ex in pairs:
        em_by_id[ex.id] = scored_em_f1(pred.answer_text, ex.gold_texts)[0]

    has_total = sum(1 for _, ex in pairs if ex.has_answer)
    no_total = len(pairs) - has_total
    has_correct = sum(
        1 for pred, ex in pairs if ex.has_answer and em_by_id[ex.id] == 1.0
    )
    no_correct = sum(
        1 for pred, ex in pairs if not ex.has_answer and em_by_id[ex.id] == 1.0
    )

    wrong_has = [
        pred for pred, ex in pairs if ex.has_answer and em_by_id[ex.id] != 1.0
    ]
    said_no_answer = sum(1 for p in wrong_has if p.answer_text == "")

    wrong = [(pred, ex) for pred, ex in pairs if em_by_id[ex.id] != 1.0]
    second_correct = 0
    for pred, ex in wrong:
        if pred.second_text is None:
            continue
        if scored_em_f1(pred.second_text, ex.gold_texts)[0] == 1.0:
            second_correct += 1

    correct_lengths = [
        len(ex.context_tokens) for _, ex in pairs if em_by_id[ex.id] == 1.0
    ]

    report = AnalysisReport(
        n_examples=len(pairs),
        has_answer_accuracy=(has_correct / has_total) if has_total else None,
        no_answer_accuracy=(no_correct / no_total) if no_total else None,
        wrong_has_answer_said_no_answer=(
            said_no_answer / len(wrong_has) if wrong_has else None
        ),
        second_best_correct_rate=(second_correct / len(wrong) if wrong else None),
        mean_context_tokens_correct=_mean_or_none(correct_lengths),
    )

    if comparison_preds is not None:
        cmp_pairs = _align(comparison_preds, examples)
        cmp_em = {
            ex.id: scored_em_f1(pred.answer_text, ex.gold_texts)[0] for pred, ex in cmp_pairs
        }
        report.mean_context_tokens_correct_comparison = _mean_or_none(
            len(ex.context_tokens) for _, ex in cmp_pairs if cmp_em[ex.id] == 1.0
        )
        report.mean_context_tokens_uniquely_correct = _mean_or_none(
            len(ex.context_tokens)
            for _, ex in pairs
            if em_by_id[ex.id] == 1.0 and cmp_em[ex.id] != 1.0
        )
        report.mean_context_tokens_uniquely_correct_comparison = _mean_or_none(
            len(ex.context_tokens)
            for _, ex in pairs
            if cmp_em[ex.id] == 1.0 and em_by_id[ex.id] != 1.0
        )
    return report


def evaluate_classification(logits: np.ndarray, labels: np.ndarray) -> MetricsReport:
    """Accuracy (reported as EM) and binary F1 for the class task."""
    logits = np.asarray(logits).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if logits.shape != labels.shape:
        raise DimensionError(
            f"logits shape {logits.shape} != labels shape {labels.shape}"
        )
    preds = (logits > 0).astype(np.int64)
    labels = labels.astype(np.int64)
    accuracy = float((preds == labels).mean())
    tp = int(np.sum((preds == 1) & (labels == 1)))
    fp = int(np.sum((preds == 1) & (labels == 0)))
    fn = int(np.sum((preds == 0) & (labels == 1)))
    f1 = (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else 0.0
    return MetricsReport(
        em=accuracy,
        f1=f1,
        n_examples=len(labels),
        has_answer_correct=tp,
        has_answer_total=int((labels == 1).sum()),
        no_answer_correct=int(np.sum((preds == 0) & (labels == 0))),
        no_answer_total=int((labels == 0).sum()),
    )
