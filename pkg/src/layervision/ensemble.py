"""Element-wise-max ensembling of model softmax probabilities.

Two (or more) probability vectors are combined per position by taking the
maximum; the predicted position is the argmax of the combined vector.
The combined vector is used as-is — it need not sum to 1, and decoding
consumes it without renormalization.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .errors import AlignmentError, ContractError
from .evaluation import (
    DEFAULT_MAX_ANSWER_LEN,
    ExamplePrediction,
    WindowPrediction,
    aggregate_windows,
    decode_probs,
)

PROB_TOLERANCE = 1e-6


def _validate_members(members: Sequence[np.ndarray]) -> np.ndarray:
    if len(members) < 2:
        raise ContractError(f"ensemble needs >= 2 members, got {len(members)}")
    arrays = [np.asarray(m, dtype=np.float64) for m in members]
    length = arrays[0].shape
    for i, arr in enumerate(arrays):
        if arr.ndim != 1 or arr.shape != length:
            raise ContractError(
                f"member {i} has shape {arr.shape}, expected {length}"
            )
        if not np.all(np.isfinite(arr)) or arr.min() < -PROB_TOLERANCE:
            raise ContractError(f"member {i} is not a probability vector")
        if abs(arr.sum() - 1.0) > PROB_TOLERANCE:
            raise ContractError(
                f"member {i} sums to {arr.sum():.8f}, expected 1 within "
                f"{PROB_TOLERANCE}"
            )
    return np.stack(arrays)


def combine_max(members: Sequence[np.ndarray]) -> np.ndarray:
    """Element-wise maximum over validated probability vectors."""
    return _validate_members(members).max(axis=0)


def ensemble_argmax(members: Sequence[np.ndarray]) -> int:
    """argmax_i max_members(member[i]); ties break to the smallest index.

    Folding max pairwise generalizes the two-member rule to any k >= 2.
    """
    return int(np.argmax(combine_max(members)))


def ensemble_decode(
    window_preds: Sequence[Sequence[WindowPrediction]],
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> ExamplePrediction:
    """Combine aligned per-window probabilities from k models, then decode.

    `window_preds[m]` holds model m's WindowPredictions for one example,
    in window order; all models must cover exactly the same windows.
    """
    if len(window_preds) < 2:
        raise ContractError("ensemble_decode needs predictions from >= 2 models")
    first = window_preds[0]
    if not first:
        raise ContractError("ensemble_decode needs at least one window")
    keys = [p.window.key if p.window else None for p in first]
    for m, preds in enumerate(window_preds[1:], start=1):
        other = [p.window.key if p.window else None for p in preds]
        if other != keys:
            raise AlignmentError(
                f"model {m} windows {other} do not match model 0 windows {keys}"
            )

    combined = []
    for w_idx, base in enumerate(first):
        start = combine_max([wp[w_idx].start_probs for wp in window_preds])
        end = combine_max([wp[w_idx].end_probs for wp in window_preds])
        lo, hi = base.window.context_positions()
        best, second, no_answer = decode_probs(
            start, end, max_answer_len, context_lo=lo, context_hi=hi
        )
        combined.append(
            WindowPrediction(
                start_probs=start,
                end_probs=end,
                best=best,
                no_answer_score=no_answer,
                second_best=second,
                window=base.window,
            )
        )
    return aggregate_windows(combined)
