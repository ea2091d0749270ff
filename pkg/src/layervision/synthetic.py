"""Deterministic synthetic activation stacks with a planted span signal.

Base activations are a pure hash of (seed, token id, window position,
channel, hidden index) — no RNG state, so generation is order-independent
and parallelizable.  On one designated channel, fixed "start" and "end"
direction vectors (scaled by `plant_strength`) are added at the window's
label positions.  No-answer windows are labeled (0, 0), so their plants
land on the CLS slot: the label convention itself is part of the signal a
head has to learn.

A linear head can solve this task, which makes it a crisp end-to-end
check: training must push the learned pooling weight of the planted
channel above uniform, and decoding must recover the planted spans.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .datapipe import (
    PAD_ID,
    CacheManifest,
    QAExample,
    Window,
    tokens_to_text,
    window_example,
    write_cache,
    write_examples_jsonl,
)
from .errors import ConfigError, ContractError

_U64 = np.uint64
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_K_TOKEN = _U64(0x8B72E1D4C9F5A637)
_K_POS = _U64(0xD6E8FEB86659FD93)
_K_CHAN = _U64(0xA3B195354A39B70D)
_K_HID = _U64(0x1B56C4F5931C6C71)
_MARK_START = _U64(0x5851F42D4C957F2D)
_MARK_END = _U64(0x14057B7EF767814F)


def _mix64(x: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


def _uniform01(bits: np.ndarray) -> np.ndarray:
    return (bits >> _U64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class ToyConfig:
    """Dimensions and signal strength of the synthetic activations."""

    tokens: int = 48
    hidden: int = 32
    channels: int = 9
    seed: int = 0
    plant_layer: int = 6
    plant_strength: float = 2000.0
    noise_std: float = 1.0

    def __post_init__(self):
        if not (0 <= self.plant_layer < self.channels):
            raise ConfigError(
                f"plant_layer {self.plant_layer} outside [0, {self.channels})"
            )
        if self.plant_strength < 0:
            raise ConfigError("plant_strength must be non-negative")


def plant_direction(cfg: ToyConfig, which: str) -> np.ndarray:
    """Fixed unit-length sign vector marking span starts or ends."""
    marker = _MARK_START if which == "start" else _MARK_END
    with np.errstate(over="ignore"):
        h = np.arange(cfg.hidden, dtype=np.uint64)
        bits = _mix64(_mix64(_U64(cfg.seed) ^ _GOLDEN) ^ marker ^ h * _K_HID)
    signs = np.where(bits & _U64(1), 1.0, -1.0)
    return (signs / np.sqrt(cfg.hidden)).astype(np.float64)


def _base_noise(token_ids: np.ndarray, cfg: ToyConfig) -> np.ndarray:
    """Hash-derived activations for one window, shape (T, H, C)."""
    t = token_ids.shape[0]
    with np.errstate(over="ignore"):
        seed = _mix64(_U64(cfg.seed) ^ _GOLDEN)
        tok = token_ids.astype(np.uint64)[:, None, None] * _K_TOKEN
        pos = np.arange(t, dtype=np.uint64)[:, None, None] * _K_POS
        hid = np.arange(cfg.hidden, dtype=np.uint64)[None, :, None] * _K_HID
        chan = np.arange(cfg.channels, dtype=np.uint64)[None, None, :] * _K_CHAN
        bits = _mix64(seed ^ tok ^ pos ^ hid ^ chan)
    # uniform on [-sqrt(3), sqrt(3)] * std has standard deviation exactly std
    u = _uniform01(bits)
    return (2.0 * u - 1.0) * (np.sqrt(3.0) * cfg.noise_std)


def window_activations(window: Window, cfg: ToyConfig) -> np.ndarray:
    """Activations for one labeled window, padded to cfg.tokens."""
    n = len(window.token_ids)
    if n > cfg.tokens:
        raise ContractError(
            f"window has {n} tokens, toy stacks hold {cfg.tokens}"
        )
    ids = np.full(cfg.tokens, PAD_ID, dtype=np.int64)
    ids[:n] = window.token_ids
    stack = _base_noise(ids, cfg)
    stack[window.start_label, :, cfg.plant_layer] += cfg.plant_strength * plant_direction(cfg, "start")
    stack[window.end_label, :, cfg.plant_layer] += cfg.plant_strength * plant_direction(cfg, "end")
    return stack.astype(np.float32)


def generate_activations(example: QAExample, cfg: ToyConfig) -> np.ndarray:
    """Stack for an example that fits one window of cfg.tokens."""
    windows = window_example(example, max_len=cfg.tokens, overlap=0)
    if len(windows) != 1:
        raise ContractError(
            f"example {example.id} needs {len(windows)} windows; "
            "generate_activations expects exactly one"
        )
    return window_activations(windows[0], cfg)


def _make_example(rng: np.random.Generator, idx: int, cfg: ToyConfig,
                  answerable: bool) -> QAExample:
    q_len = int(rng.integers(3, 9))
    capacity = cfg.tokens - q_len - 3
    if capacity < 4:
        raise ConfigError(
            f"cfg.tokens={cfg.tokens} leaves no room for a {q_len}-token question"
        )
    ctx_len = int(rng.integers(min(10, capacity), min(35, capacity) + 1))
    question = [int(v) for v in rng.integers(1000, 2000, size=q_len)]
    context = [int(v) for v in rng.integers(2000, 9000, size=ctx_len)]
    answers = []
    gold_texts = []
    if answerable:
        length = int(rng.integers(1, 5))
        start = int(rng.integers(0, ctx_len - length + 1))
        end = start + length - 1
        answers = [(start, end)]
        gold_texts = [tokens_to_text(context[start : end + 1])]
    return QAExample(
        id=f"toy-{idx:05d}",
        question_tokens=question,
        context_tokens=context,
        answers=answers,
        gold_texts=gold_texts,
    )


def generate_synthetic_dataset(
    n: int,
    cfg: ToyConfig,
    answerable_fraction: float = 0.5,
    out_dir=".",
    split: str = "train",
    dataset_seed: int | None = None,
) -> tuple[list[QAExample], CacheManifest, Path]:
    """Write a labeled span cache plus its JSONL examples; fully seeded.

    `dataset_seed` draws the example content; it defaults to cfg.seed and
    can differ from it (held-out splits share the activation function but
    not the examples).  round(fraction * n) examples get planted spans,
    the rest are no-answer.
    """
    if n < 1:
        raise ConfigError("need at least one example")
    if not (0.0 <= answerable_fraction <= 1.0):
        raise ConfigError(f"answerable_fraction must be in [0, 1], got {answerable_fraction}")
    dataset_seed = cfg.seed if dataset_seed is None else dataset_seed
    rng = np.random.default_rng(dataset_seed)
    n_answerable = int(round(answerable_fraction * n))
    flags = np.zeros(n, dtype=bool)
    flags[:n_answerable] = True
    rng.shuffle(flags)

    examples = [
        _make_example(rng, i, cfg, answerable=bool(flags[i])) for i in range(n)
    ]

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jsonl_path = out_dir / f"{split}.examples.jsonl"
    write_examples_jsonl(examples, jsonl_path)

    windows = []
    for ex in examples:
        wins = window_example(ex, max_len=cfg.tokens, overlap=0)
        windows.extend(wins)

    def records():
        for w in windows:
            yield window_activations(w, cfg), (w.start_label, w.end_label)

    cache_path = out_dir / f"{split}.bve"
    manifest = write_cache(
        records(),
        cache_path,
        tokens=cfg.tokens,
        hidden=cfg.hidden,
        channels=cfg.channels,
        label_schema="span",
        split=split,
        metadata={
            "source": jsonl_path.name,
            "seed": dataset_seed,
            "max_len": cfg.tokens,
            "overlap": 0,
            "generator": "toy",
            "toy": {
                "T": cfg.tokens, "H": cfg.hidden, "C": cfg.channels,
                "seed": cfg.seed, "plant_layer": cfg.plant_layer,
                "plant_strength": cfg.plant_strength, "noise_std": cfg.noise_std,
            },
        },
        record_ids=[w.key for w in windows],
    )
    return examples, manifest, cache_path


def generate_classification_dataset(
    n: int,
    cfg: ToyConfig,
    positive_fraction: float = 0.5,
    out_dir=".",
    split: str = "train",
    dataset_seed: int | None = None,
) -> tuple[list[str], CacheManifest, Path]:
    """(1, H, C) stacks with the start-direction planted iff the label is 1."""
    if n < 1:
        raise ConfigError("need at least one example")
    if not (0.0 <= positive_fraction <= 1.0):
        raise ConfigError(f"positive_fraction must be in [0, 1], got {positive_fraction}")
    dataset_seed = cfg.seed if dataset_seed is None else dataset_seed
    rng = np.random.default_rng(dataset_seed)
    n_positive = int(round(positive_fraction * n))
    labels = np.zeros(n, dtype=np.uint32)
    labels[:n_positive] = 1
    rng.shuffle(labels)
    tokens = rng.integers(2000, 9000, size=n)

    cls_cfg = replace(cfg, tokens=1)
    direction = plant_direction(cls_cfg, "start")

    ids = [f"toycls-{i:05d}" for i in range(n)]

    def records():
        for i in range(n):
            stack = _base_noise(np.asarray([tokens[i]], dtype=np.int64), cls_cfg)
            if labels[i]:
                stack[0, :, cls_cfg.plant_layer] += cls_cfg.plant_strength * direction
            yield stack.astype(np.float32), (int(labels[i]),)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache_path = out_dir / f"{split}.cls.bve"
    manifest = write_cache(
        records(),
        cache_path,
        tokens=1,
        hidden=cfg.hidden,
        channels=cfg.channels,
        label_schema="class",
        split=split,
        metadata={
            "seed": dataset_seed,
            "generator": "toy-class",
            "toy": {
                "H": cfg.hidden, "C": cfg.channels, "seed": cfg.seed,
                "plant_layer": cfg.plant_layer,
                "plant_strength": cfg.plant_strength, "noise_std": cfg.noise_std,
            },
        },
        record_ids=ids,
    )
    return ids, manifest, cache_path
