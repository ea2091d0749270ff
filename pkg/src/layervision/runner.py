"""Training runs: configuration, the adaptive-moment optimizer, model
serialization, and the forward/decode drivers shared by the CLI.

Every run is a pure function of (config, seed): parameter init, batch
order and synthetic data are all derived from the run seed, so re-running
a config reproduces parameter blobs and metrics byte-for-byte.
"""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet
from .datapipe import (
    CacheReader,
    QAExample,
    Window,
    batch_iter,
    read_cache,
    read_examples_jsonl,
    window_example,
    write_cache,
)
from .errors import AlignmentError, ConfigError, FormatError
from .evaluation import (
    DEFAULT_MAX_ANSWER_LEN,
    ExamplePrediction,
    MetricsReport,
    WindowPrediction,
    aggregate_windows,
    decode_window,
    evaluate,
    evaluate_classification,
)
from .heads import HeadModel, ModelSpec, count_params

THREADS_ENV = "LAYERVISION_THREADS"

PARAMS_FORMAT = "lvparams1"


def worker_count() -> int:
    """Worker cap from LAYERVISION_THREADS (default: single-threaded)."""
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
    return max(1, n)


@dataclass
class RunConfig:
    """Everything a training/eval run needs; validated up front."""

    task: str = "span"
    head: str = "lp"
    adapter_size: int = 0
    shared: bool = True
    use_skip: bool = False
    conv_kernel_h: int = 0
    conv_channels: int = 64
    lr: float = 1e-5
    batch_size: int = 16
    epochs: int = 1
    seed: int = 0
    fraction: float = 1.0
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN
    cache: str = ""
    eval_cache: str = ""
    out: str = "runs"

    def __post_init__(self):
        if self.task not in ("span", "class"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.head not in ("lp", "ap", "adapter", "conv"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0.0 < self.fraction <= 1.0):
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if self.max_answer_len < 1:
            raise ConfigError(f"max_answer_len must be >= 1, got {self.max_answer_len}")

    def model_spec(self, reader: CacheReader) -> ModelSpec:
        if self.task == "span" and reader.label_schema != "span":
            raise ConfigError(
                f"span head on a {reader.label_schema!r} cache: schema mismatch"
            )
        if self.task == "class" and reader.label_schema != "class":
            raise ConfigError(
                f"classification head on a {reader.label_schema!r} cache: "
                "schema mismatch"
            )
        return ModelSpec(
            task=self.task,
            kind=self.head,
            tokens=reader.tokens,
            hidden=reader.hidden,
            channels=reader.channels,
            adapter_size=self.adapter_size,
            shared=self.shared,
            use_skip=self.use_skip,
            conv_kernel_h=self.conv_kernel_h,
            conv_channels=self.conv_channels,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunRecord:
    """Appended to runs.jsonl after every training run."""

    config: dict
    param_count: int
    param_fraction: float
    epoch_losses: list[float]
    metrics: Optional[dict]
    wall_clock_s: float
    seed: int

    def to_json(self) -> dict:
        return asdict(self)


class Adam:
    """Adaptive-moment optimizer, float32, standard decay constants."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]) -> ParamSet:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1**self.t
        bias2 = 1.0 - b2**self.t
        out = {}
        for pid, p in params.items():
            g = grads[pid]
            m = self._m.get(pid)
            if m is None:
                m = np.zeros_like(p.data)
                self._v[pid] = np.zeros_like(p.data)
            v = self._v[pid]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self._m[pid] = m
            self._v[pid] = v
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            out[pid] = ad.parameter(p.data - self.lr * update, dtype=p.dtype)
        return ParamSet(out)


def train(model: HeadModel, reader: CacheReader, cfg: RunConfig) -> tuple[HeadModel, list[float]]:
    """Optimize the head on the cache; returns (trained model, loss/epoch)."""
    params = model.params
    opt = Adam(cfg.lr)
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        steps = 0
        for batch in batch_iter(
            reader, cfg.batch_size, cfg.seed, cfg.fraction, epochs=1, start_epoch=epoch
        ):
            loss = model.loss(batch.stacks, batch.labels, params)
            report = ad.backward(loss, params)
            params = opt.step(params, report.grads)
            total += report.loss
            steps += 1
        losses.append(total / steps if steps else float("nan"))
    return model.with_params(params), losses


# ---------------------------------------------------------------------------
# model blob io
# ---------------------------------------------------------------------------


def save_model(model: HeadModel, out_dir, prefix: str = "model") -> Path:
    """Write <prefix>.json + <prefix>.params.bin (lexicographic id order)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob_path = out_dir / f"{prefix}.params.bin"
    meta_path = out_dir / f"{prefix}.json"
    entries = []
    offset = 0
    with open(blob_path, "wb") as f:
        for pid, p in model.params.items():
            raw = np.ascontiguousarray(p.data, dtype="<f4").tobytes()
            entries.append({"id": pid, "shape": list(p.shape), "offset": offset})
            f.write(raw)
            offset += len(raw)
    meta = {
        "format": PARAMS_FORMAT,
        "spec": model.spec.to_dict(),
        "params": entries,
        "blob": blob_path.name,
        "bytes": offset,
    }
    with open(meta_path, "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    return meta_path


def load_model(meta_path) -> HeadModel:
    meta_path = Path(meta_path)
    with open(meta_path) as f:
        meta = json.load(f)
    if meta.get("format") != PARAMS_FORMAT:
        raise FormatError(f"{meta_path}: unknown model format {meta.get('format')!r}")
    spec = ModelSpec.from_dict(meta["spec"])
    blob_path = meta_path.parent / meta["blob"]
    raw = np.fromfile(blob_path, dtype="<f4")
    if raw.size * 4 != meta["bytes"]:
        raise FormatError(
            f"{blob_path}: expected {meta['bytes']} bytes, found {raw.size * 4}"
        )
    params = ParamSet()
    for entry in meta["params"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"] // 4
        values = raw[start : start + size].reshape(shape)
        params.add(entry["id"], ad.parameter(values))
    return HeadModel(spec, params)


# ---------------------------------------------------------------------------
# prediction drivers
# ---------------------------------------------------------------------------


def windows_for_examples(
    examples: list[QAExample], max_len: int, overlap: int
) -> dict[str, Window]:
    out: dict[str, Window] = {}
    for ex in examples:
        for win in window_example(ex, max_len=max_len, overlap=overlap):
            out[win.key] = win
    return out


def cache_windows(reader: CacheReader, examples: list[QAExample]) -> list[Window]:
    """Window every example with the cache's recorded settings and align
    windows to cache records by manifest id."""
    if reader.manifest is None or reader.record_ids is None:
        raise FormatError(f"{reader.path}: manifest with record ids required")
    meta = reader.manifest.metadata
    if "max_len" not in meta or "overlap" not in meta:
        raise FormatError(
            f"{reader.path}: manifest metadata lacks windowing settings"
        )
    table = windows_for_examples(examples, int(meta["max_len"]), int(meta["overlap"]))
    windows = []
    for key in reader.record_ids:
        if key not in table:
            raise AlignmentError(f"cache record {key!r} has no matching window")
        windows.append(table[key])
    return windows


def span_forward_probs(
    model: HeadModel, reader: CacheReader, batch_size: int = 256
) -> tuple[np.ndarray, np.ndarray]:
    """Start/end logits for every cache record, in record order."""
    n = len(reader)
    t = reader.tokens
    starts = np.empty((n, t), dtype=np.float32)
    ends = np.empty((n, t), dtype=np.float32)
    for lo in range(0, n, batch_size):
        idx = list(range(lo, min(lo + batch_size, n)))
        stacks, _ = reader.stack_batch(idx)
        s, e = model.span_logits(stacks)
        starts[lo : lo + len(idx)] = s.data
        ends[lo : lo + len(idx)] = e.data
    return starts, ends


def decode_records(
    windows: list[Window],
    start_logits: np.ndarray,
    end_logits: np.ndarray,
    max_answer_len: int,
) -> list[WindowPrediction]:
    """Decode every record; fans out across LAYERVISION_THREADS workers."""

    def one(i: int) -> WindowPrediction:
        return decode_window(
            start_logits[i], end_logits[i], max_answer_len, window=windows[i]
        )

    workers = worker_count()
    indices = range(len(windows))
    if workers == 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, indices))


def group_by_example(
    windows: list[Window], preds: list[WindowPrediction]
) -> dict[str, list[WindowPrediction]]:
    grouped: dict[str, list[WindowPrediction]] = {}
    for win, pred in zip(windows, preds):
        grouped.setdefault(win.example_id, []).append(pred)
    for plist in grouped.values():
        plist.sort(key=lambda p: p.window.window_index)
    return grouped


def predict_spans(
    model: HeadModel,
    reader: CacheReader,
    examples: list[QAExample],
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> tuple[list[ExamplePrediction], list[Window], list[WindowPrediction]]:
    """Forward + decode + aggregate the whole cache."""
    windows = cache_windows(reader, examples)
    start_logits, end_logits = span_forward_probs(model, reader)
    window_preds = decode_records(windows, start_logits, end_logits, max_answer_len)
    grouped = group_by_example(windows, window_preds)
    order = [ex.id for ex in examples if ex.id in grouped]
    preds = [aggregate_windows(grouped[ex_id]) for ex_id in order]
    return preds, windows, window_preds


def eval_span_model(
    model: HeadModel,
    reader: CacheReader,
    examples: list[QAExample],
    max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
) -> tuple[MetricsReport, list[ExamplePrediction], list[Window], list[WindowPrediction]]:
    preds, windows, window_preds = predict_spans(model, reader, examples, max_answer_len)
    covered = {p.example_id for p in preds}
    report = evaluate(preds, [ex for ex in examples if ex.id in covered])
    return report, preds, windows, window_preds


def class_forward_logits(
    model: HeadModel, reader: CacheReader, batch_size: int = 512
) -> tuple[np.ndarray, np.ndarray]:
    n = len(reader)
    logits = np.empty(n, dtype=np.float32)
    labels = np.empty(n, dtype=np.uint32)
    for lo in range(0, n, batch_size):
        idx = list(range(lo, min(lo + batch_size, n)))
        stacks, lab = reader.stack_batch(idx)
        logits[lo : lo + len(idx)] = model.class_logits(stacks).data
        labels[lo : lo + len(idx)] = lab[:, 0]
    return logits, labels


def eval_class_model(model: HeadModel, reader: CacheReader) -> MetricsReport:
    logits, labels = class_forward_logits(model, reader)
    return evaluate_classification(logits, labels)


# ---------------------------------------------------------------------------
# probability dumps (ensemble interchange format)
# ---------------------------------------------------------------------------


def write_prob_dump(
    path,
    windows: list[Window],
    window_preds: list[WindowPrediction],
    source_meta: dict,
) -> None:
    """Per-window start/end probabilities as a (T, 2, 1) cache keyed by
    window id; `source_meta` carries the windowing settings forward."""
    t = len(window_preds[0].start_probs)

    def records():
        for pred in window_preds:
            block = np.zeros((t, 2, 1), dtype=np.float32)
            block[:, 0, 0] = pred.start_probs
            block[:, 1, 0] = pred.end_probs
            yield block, (0, 0)

    write_cache(
        records(),
        path,
        tokens=t,
        hidden=2,
        channels=1,
        label_schema="span",
        split="probs",
        metadata={k: source_meta[k] for k in ("source", "max_len", "overlap") if k in source_meta},
        record_ids=[w.key for w in windows],
    )


def read_prob_dump(path) -> tuple[CacheReader, list[str]]:
    _, reader = read_cache(path)
    if reader.hidden != 2 or reader.channels != 1:
        raise FormatError(f"{path}: not a probability dump (H={reader.hidden}, C={reader.channels})")
    if reader.record_ids is None:
        raise FormatError(f"{path}: probability dump lacks window ids")
    return reader, reader.record_ids


def load_examples_for_cache(reader: CacheReader, examples_path=None) -> list[QAExample]:
    """Examples JSONL: explicit path, or the manifest's recorded source."""
    if examples_path:
        return read_examples_jsonl(examples_path)
    if reader.manifest and "source" in reader.manifest.metadata:
        candidate = reader.path.parent / reader.manifest.metadata["source"]
        if candidate.exists():
            return read_examples_jsonl(candidate)
    raise ConfigError(
        f"no examples JSONL given and none recorded beside {reader.path}"
    )


# ---------------------------------------------------------------------------
# full runs
# ---------------------------------------------------------------------------


def run_training(cfg: RunConfig) -> tuple[HeadModel, RunRecord, dict]:
    """cmd_train: fit, optionally evaluate, save blob + record."""
    t0 = time.monotonic()
    _, reader = read_cache(cfg.cache)
    spec = cfg.model_spec(reader)
    model = HeadModel.initialize(spec, cfg.seed)
    model, losses = train(model, reader, cfg)

    metrics_dict = None
    artifacts: dict = {}
    if cfg.eval_cache:
        _, eval_reader = read_cache(cfg.eval_cache)
        if cfg.task == "span":
            examples = load_examples_for_cache(eval_reader)
            report, preds, windows, window_preds = eval_span_model(
                model, eval_reader, examples, cfg.max_answer_len
            )
            artifacts.update(
                preds=preds, windows=windows, window_preds=window_preds,
                eval_reader=eval_reader,
            )
        else:
            report = eval_class_model(model, eval_reader)
        metrics_dict = report.to_dict()

    count, frac = count_params(spec)
    record = RunRecord(
        config=cfg.to_dict(),
        param_count=count,
        param_fraction=frac,
        epoch_losses=[float(v) for v in losses],
        metrics=metrics_dict,
        wall_clock_s=time.monotonic() - t0,
        seed=cfg.seed,
    )
    return model, record, artifacts


def dump_json(obj, path) -> None:
    """Canonical JSON used for every emitted report (byte-stable)."""
    with open(path, "w") as f:
        json.dump(obj, f, sort_keys=True, indent=2)
        f.write("\n")


def append_run_record(record: RunRecord, path) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
