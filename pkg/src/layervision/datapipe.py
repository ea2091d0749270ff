"""Example windowing, label assignment, the on-disk activation cache, and
seeded batch iteration.

Window layout is [CLS] question [SEP] context-slice [SEP] (then padding up
to the model's token length when activations are generated).  A window
whose context slice does not fully contain a gold span is labeled (0, 0),
i.e. "no answer" at the CLS slot.

Cache file layout (little-endian), magic "BVE1":

    offset  size  field
    0       4     magic b"BVE1"
    4       4     u32 version (1)
    8       4     u32 T
    12      4     u32 H
    16      4     u32 C
    20      1     u8 label schema (0 = span, 1 = class)
    21      3     reserved
    24      8     u64 record count
    32      ...   records: T*H*C float32 row-major (token, hidden, channel),
                  then the label block (two u32 for span, one u32 for class)

A sibling JSON manifest `<file>.manifest.json` carries the same header
fields plus per-record byte offsets, optional per-record ids, split name
and creation metadata.  Caches are immutable once written; any number of
concurrent readers may share one file.

Parameter blobs reuse the same conventions: a flat little-endian float32
file holding every parameter in lexicographic id order, described by a
JSON sidecar (see `cli` for the writer).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError

CLS_ID = 101
SEP_ID = 102
PAD_ID = 0

MAGIC = b"BVE1"
VERSION = 1
HEADER_SIZE = 32
SCHEMA_SPAN = 0
SCHEMA_CLASS = 1

DEFAULT_MAX_LEN = 386
DEFAULT_OVERLAP = 128


def tokens_to_text(token_ids: Sequence[int]) -> str:
    """Canonical text rendering of token ids (no vocabulary at desk scale)."""
    return " ".join(f"t{t}" for t in token_ids)


@dataclass
class QAExample:
    """One pre-tokenized question/context pair with gold spans.

    `answers` holds inclusive (start, end) token spans in context
    coordinates; empty means "no answer".  `gold_texts` are the reference
    answer strings used for EM/F1.
    """

    id: str
    question_tokens: list[int]
    context_tokens: list[int]
    answers: list[tuple[int, int]] = field(default_factory=list)
    gold_texts: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.context_tokens)
        for s, e in self.answers:
            if not (0 <= s <= e < n):
                raise ContractError(
                    f"example {self.id}: span ({s}, {e}) outside context of {n} tokens"
                )

    @property
    def has_answer(self) -> bool:
        return bool(self.answers)

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "question_tokens": list(self.question_tokens),
            "context_tokens": list(self.context_tokens),
            "answers": [list(a) for a in self.answers],
            "gold_texts": list(self.gold_texts),
        }

    @classmethod
    def from_json(cls, d: dict) -> "QAExample":
        return cls(
            id=d["id"],
            question_tokens=list(d["question_tokens"]),
            context_tokens=list(d["context_tokens"]),
            answers=[tuple(a) for a in d.get("answers", [])],
            gold_texts=list(d.get("gold_texts", [])),
        )


def write_examples_jsonl(examples: Iterable[QAExample], path) -> None:
    with open(path, "w") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def read_examples_jsonl(path) -> list[QAExample]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(QAExample.from_json(json.loads(line)))
    return out


@dataclass
class Window:
    """One [CLS] question [SEP] context-slice [SEP] segment of an example."""

    example_id: str
    window_index: int
    token_ids: list[int]
    context_offset: int  # index of the first included context token
    context_start: int  # window position of the first context token
    context_len: int
    start_label: int = 0
    end_label: int = 0

    @property
    def key(self) -> str:
        return f"{self.example_id}#{self.window_index}"

    def context_positions(self) -> tuple[int, int]:
        """Half-open window-coordinate range holding context tokens."""
        return self.context_start, self.context_start + self.context_len

    def to_context_span(self, i: int, j: int) -> tuple[int, int]:
        """Map an inclusive window span back to context coordinates."""
        off = self.context_offset - self.context_start
        return i + off, j + off


def window_example(
    ex: QAExample,
    max_len: int = DEFAULT_MAX_LEN,
    overlap: int = DEFAULT_OVERLAP,
) -> list[Window]:
    """Split an example into overlapping windows and label each one.

    capacity = max_len - len(question) - 3 special slots; consecutive
    windows start `capacity - overlap` tokens apart, so non-final
    neighbours share exactly `overlap` context tokens.  The final window
    is clamped to end at the last context token (it may be short).
    """
    q = len(ex.question_tokens)
    capacity = max_len - q - 3
    if capacity < 1:
        raise ConfigError(
            f"max_len {max_len} leaves no context capacity for a "
            f"{q}-token question"
        )
    if not (0 <= overlap < capacity):
        raise ConfigError(
            f"overlap {overlap} must be in [0, capacity={capacity})"
        )
    stride = capacity - overlap
    n_ctx = len(ex.context_tokens)

    starts = []
    start = 0
    while True:
        starts.append(start)
        if start + capacity >= n_ctx:
            break
        start += stride

    windows = []
    for idx, c0 in enumerate(starts):
        c1 = min(c0 + capacity, n_ctx)
        piece = ex.context_tokens[c0:c1]
        token_ids = [CLS_ID, *ex.question_tokens, SEP_ID, *piece, SEP_ID]
        win = Window(
            example_id=ex.id,
            window_index=idx,
            token_ids=token_ids,
            context_offset=c0,
            context_start=q + 2,
            context_len=len(piece),
        )
        win.start_label, win.end_label = assign_labels(win, ex)
        windows.append(win)
    return windows


def assign_labels(window: Window, ex: QAExample) -> tuple[int, int]:
    """Window-coordinate labels for the first gold span fully inside the
    window's context slice; (0, 0) when no span fits."""
    c0 = window.context_offset
    c1 = c0 + window.context_len
    for s, e in ex.answers:
        if c0 <= s and e < c1:
            shift = window.context_start - c0
            return s + shift, e + shift
    return 0, 0


# ---------------------------------------------------------------------------
# cache container
# ---------------------------------------------------------------------------


@dataclass
class CacheManifest:
    version: int
    tokens: int
    hidden: int
    channels: int
    dtype: str
    count: int
    offsets: list[int]
    split: str
    label_schema: str  # "span" | "class"
    metadata: dict = field(default_factory=dict)
    record_ids: list[str] | None = None

    def record_size(self) -> int:
        label_bytes = 8 if self.label_schema == "span" else 4
        return self.tokens * self.hidden * self.channels * 4 + label_bytes

    def to_json(self) -> dict:
        d = {
            "version": self.version,
            "T": self.tokens,
            "H": self.hidden,
            "C": self.channels,
            "dtype": self.dtype,
            "count": self.count,
            "offsets": self.offsets,
            "split": self.split,
            "label_schema": self.label_schema,
            "metadata": self.metadata,
        }
        if self.record_ids is not None:
            d["record_ids"] = self.record_ids
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CacheManifest":
        return cls(
            version=d["version"],
            tokens=d["T"],
            hidden=d["H"],
            channels=d["C"],
            dtype=d["dtype"],
            count=d["count"],
            offsets=list(d["offsets"]),
            split=d.get("split", ""),
            label_schema=d["label_schema"],
            metadata=d.get("metadata", {}),
            record_ids=d.get("record_ids"),
        )


def manifest_path(cache_path) -> Path:
    return Path(str(cache_path) + ".manifest.json")


def write_cache(
    records: Iterable[tuple[np.ndarray, tuple[int, ...]]],
    path,
    tokens: int,
    hidden: int,
    channels: int,
    label_schema: str = "span",
    split: str = "",
    metadata: dict | None = None,
    record_ids: Sequence[str] | None = None,
) -> CacheManifest:
    """Stream (stack, labels) records to disk and write the manifest.

    Span records carry (start, end) labels, class records a single label.
    All stacks must share (T, H, C); drift raises FormatError.  The
    round-trip through `read_cache` is bit-exact.
    """
    if label_schema not in ("span", "class"):
        raise ConfigError(f"unknown label schema {label_schema!r}")
    schema_byte = SCHEMA_SPAN if label_schema == "span" else SCHEMA_CLASS
    n_labels = 2 if label_schema == "span" else 1
    path = Path(path)

    offsets: list[int] = []
    count = 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IIII", VERSION, tokens, hidden, channels))
        f.write(struct.pack("<B3x", schema_byte))
        f.write(struct.pack("<Q", 0))  # patched after streaming
        for stack, labels in records:
            arr = np.asarray(stack)
            if arr.shape != (tokens, hidden, channels):
                raise FormatError(
                    f"record {count} has shape {arr.shape}, cache is "
                    f"({tokens}, {hidden}, {channels})"
                )
            labels = tuple(int(v) for v in np.atleast_1d(np.asarray(labels)))
            if len(labels) != n_labels:
                raise FormatError(
                    f"record {count} has {len(labels)} labels, schema "
                    f"{label_schema!r} needs {n_labels}"
                )
            offsets.append(f.tell())
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
            f.write(struct.pack(f"<{n_labels}I", *labels))
            count += 1
        f.seek(24)
        f.write(struct.pack("<Q", count))

    ids = list(record_ids) if record_ids is not None else None
    if ids is not None and len(ids) != count:
        raise FormatError(f"{len(ids)} record ids for {count} records")
    manifest = CacheManifest(
        version=VERSION,
        tokens=tokens,
        hidden=hidden,
        channels=channels,
        dtype="float32",
        count=count,
        offsets=offsets,
        split=split,
        label_schema=label_schema,
        metadata=metadata or {},
        record_ids=ids,
    )
    with open(manifest_path(path), "w") as f:
        json.dump(manifest.to_json(), f, sort_keys=True)
        f.write("\n")
    return manifest


class CacheReader:
    """Random-access reader over one cache file (O(1) record seeks).

    The float block is memory-mapped read-only, so readers are cheap and
    any number of them can share a file.
    """

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise FormatError(f"cache file not found: {self.path}")
        size = self.path.stat().st_size
        if size < HEADER_SIZE:
            raise FormatError(
                f"{self.path}: truncated header, {size} bytes < {HEADER_SIZE}"
            )
        with open(self.path, "rb") as f:
            head = f.read(HEADER_SIZE)
        if head[:4] != MAGIC:
            raise FormatError(
                f"{self.path}: bad magic {head[:4]!r} at byte offset 0"
            )
        version, t, h, c = struct.unpack_from("<IIII", head, 4)
        if version != VERSION:
            raise FormatError(
                f"{self.path}: unsupported version {version} at byte offset 4"
            )
        (schema_byte,) = struct.unpack_from("<B", head, 20)
        if schema_byte not in (SCHEMA_SPAN, SCHEMA_CLASS):
            raise FormatError(
                f"{self.path}: unknown label schema {schema_byte} at byte offset 20"
            )
        (count,) = struct.unpack_from("<Q", head, 24)
        self.tokens, self.hidden, self.channels = t, h, c
        self.label_schema = "span" if schema_byte == SCHEMA_SPAN else "class"
        self.n_labels = 2 if schema_byte == SCHEMA_SPAN else 1
        self._floats = t * h * c
        self._record_size = self._floats * 4 + self.n_labels * 4
        expected = HEADER_SIZE + count * self._record_size
        if size != expected:
            raise FormatError(
                f"{self.path}: expected {expected} bytes for {count} records, "
                f"found {size} (data ends at byte offset {size})"
            )
        self.count = count
        self._raw = np.memmap(self.path, dtype=np.uint8, mode="r")

        mpath = manifest_path(self.path)
        self.manifest: CacheManifest | None = None
        if mpath.exists():
            with open(mpath) as f:
                self.manifest = CacheManifest.from_json(json.load(f))
            if self.manifest.count != count:
                raise FormatError(
                    f"{mpath}: manifest count {self.manifest.count} != "
                    f"file count {count}"
                )

    @property
    def record_ids(self) -> list[str] | None:
        return self.manifest.record_ids if self.manifest else None

    def __len__(self) -> int:
        return self.count

    def offset(self, i: int) -> int:
        if not (0 <= i < self.count):
            raise IndexError(f"record {i} out of range [0, {self.count})")
        return HEADER_SIZE + i * self._record_size

    def __getitem__(self, i: int) -> tuple[np.ndarray, tuple[int, ...]]:
        off = self.offset(i)
        floats = self._raw[off : off + self._floats * 4].view("<f4")
        stack = floats.reshape(self.tokens, self.hidden, self.channels)
        label_off = off + self._floats * 4
        labels = tuple(
            int(v)
            for v in self._raw[label_off : label_off + self.n_labels * 4].view("<u4")
        )
        return np.asarray(stack), labels

    def stack_batch(self, indices) -> tuple[np.ndarray, np.ndarray]:
        stacks = np.empty(
            (len(indices), self.tokens, self.hidden, self.channels), dtype=np.float32
        )
        labels = np.empty((len(indices), self.n_labels), dtype=np.uint32)
        for row, i in enumerate(indices):
            stack, lab = self[i]
            stacks[row] = stack
            labels[row] = lab
        return stacks, labels


def read_cache(path) -> tuple[CacheManifest | None, CacheReader]:
    """Open a cache; returns (manifest-or-None, random-access reader)."""
    reader = CacheReader(path)
    return reader.manifest, reader


@dataclass
class Batch:
    stacks: np.ndarray  # (B, T, H, C) float32
    labels: np.ndarray  # (B, 2) span or (B, 1) class, uint32
    indices: list[int]
    ids: list[str] | None = None

    def __len__(self) -> int:
        return self.stacks.shape[0]


def select_fraction(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded shuffle-then-prefix: nested fractions are monotone subsets."""
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1], got {fraction}")
    k = int(round(fraction * n))
    return np.random.default_rng(seed).permutation(n)[:k]


def batch_iter(
    reader: CacheReader,
    batch_size: int,
    seed: int,
    fraction: float = 1.0,
    epochs: int = 1,
    start_epoch: int = 0,
) -> Iterator[Batch]:
    """Deterministic shuffled batches over a seeded subset of the cache.

    Epoch e re-shuffles the selected records with seed + e.  The last
    batch of an epoch may be short.
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    selected = select_fraction(len(reader), fraction, seed)
    ids = reader.record_ids
    for epoch in range(start_epoch, start_epoch + epochs):
        order = np.random.default_rng(seed + epoch).permutation(selected)
        for lo in range(0, len(order), batch_size):
            chunk = [int(i) for i in order[lo : lo + batch_size]]
            if not chunk:
                continue
            stacks, labels = reader.stack_batch(chunk)
            batch_ids = [ids[i] for i in chunk] if ids else None
            yield Batch(stacks=stacks, labels=labels, indices=chunk, ids=batch_ids)
