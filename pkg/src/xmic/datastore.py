"""Embedding store, label manifest, vocabularies, frame sampling and class partitions.

Store layout (little-endian)::

    b"XMIC" | u32 version=1 | u32 D | u32 record_count
    per record: u32 id_len | id (UTF-8) | u32 F | u8 has_hand
                | F*D float32 full | [F*D float32 hand]
"""
from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write
from .errors import DimMismatchError, FormatError, MissingLabelError, TaskMismatchError

MAGIC = b"XMIC"
VERSION = 1
TASKS = ("noun", "verb")


@dataclass
class ClipRecord:
    id: str
    full: np.ndarray
    hand: np.ndarray | None = None
    noun_label: str = ""
    verb_label: str = ""
    dataset: str = ""

    def __post_init__(self):
        self.full = np.ascontiguousarray(self.full, dtype=np.float32)
        if self.full.ndim != 2 or self.full.shape[0] < 1:
            raise DimMismatchError(f"clip {self.id!r}: full embeddings must be [F>=1, D], got {self.full.shape}")
        if self.hand is not None:
            self.hand = np.ascontiguousarray(self.hand, dtype=np.float32)
            if self.hand.shape != self.full.shape:
                raise DimMismatchError(f"clip {self.id!r}: hand {self.hand.shape} != full {self.full.shape}")

    @property
    def frame_count(self) -> int:
        return self.full.shape[0]

    @property
    def dim(self) -> int:
        return self.full.shape[1]

    def hand_or_full(self) -> np.ndarray:
        """Hand stream, or the full-frame stream when no hands were detected."""
        return self.hand if self.hand is not None else self.full

    def label(self, task: str) -> str:
        value = self.noun_label if task == "noun" else self.verb_label if task == "verb" else None
        if value is None:
            raise ValueError(f"unknown task {task!r}")
        if not value:
            raise MissingLabelError(f"clip {self.id!r} has no {task} label")
        return value


# ---------------------------------------------------------------- binary store

def write_store(records, path) -> None:
    records = list(records)
    dims = {r.dim for r in records}
    if len(dims) > 1:
        raise DimMismatchError(f"records disagree on embedding dim: {sorted(dims)}")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("clip ids must be unique within a store")
    dim = dims.pop() if dims else 0
    with atomic_write(path) as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, dim, len(records)))
        for r in records:
            if r.hand is not None and r.hand.shape != r.full.shape:
                raise DimMismatchError(f"clip {r.id!r}: hand/full shape mismatch")
            name = r.id.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            fh.write(struct.pack("<IB", r.frame_count, int(r.hand is not None)))
            fh.write(r.full.astype("<f4", copy=False).tobytes())
            if r.hand is not None:
                fh.write(r.hand.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("store file is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_store(path, manifest=None) -> list:
    """Read every record; labels are filled from ``manifest`` (path or dict) when given."""
    buf = Path(path).read_bytes()
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    version, dim, count = rd.unpack("<III")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported store version {version}")
    labels = load_manifest(manifest) if isinstance(manifest, (str, Path)) else (manifest or {})
    records = []
    for _ in range(count):
        (id_len,) = rd.unpack("<I")
        try:
            cid = rd.take(id_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: clip id is not UTF-8") from exc
        frames, has_hand = rd.unpack("<IB")
        if frames < 1 or has_hand not in (0, 1):
            raise FormatError(f"{path}: corrupt header for clip {cid!r}")
        nbytes = frames * dim * 4
        full = np.frombuffer(rd.take(nbytes), dtype="<f4").reshape(frames, dim).astype(np.float32)
        hand = None
        if has_hand:
            hand = np.frombuffer(rd.take(nbytes), dtype="<f4").reshape(frames, dim).astype(np.float32)
        meta = labels.get(cid, {})
        records.append(ClipRecord(cid, full, hand, meta.get("noun", ""), meta.get("verb", ""), meta.get("dataset", "")))
    if rd.pos != len(buf):
        raise FormatError(f"{path}: trailing bytes after {count} records")
    return records


def store_dim(path) -> int:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if len(head) < 16 or head[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic bytes")
    return struct.unpack("<III", head[4:])[1]


# ---------------------------------------------------------------- manifest

def write_manifest(records, path) -> None:
    with atomic_write(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({"id": r.id, "noun": r.noun_label, "verb": r.verb_label,
                                 "dataset": r.dataset, "frames": r.frame_count}) + "\n")


def load_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                out[row["id"]] = row
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise FormatError(f"{path}:{lineno}: bad manifest line") from exc
    return out


def attach_labels(records, manifest: dict) -> None:
    for r in records:
        meta = manifest.get(r.id)
        if meta is None:
            raise MissingLabelError(f"clip {r.id!r} missing from manifest")
        r.noun_label = meta.get("noun", "")
        r.verb_label = meta.get("verb", "")
        r.dataset = meta.get("dataset", "")


# ---------------------------------------------------------------- vocabularies

_WS = re.compile(r"\s+")


def canonicalize(name: str) -> str:
    return _WS.sub(" ", name.strip().lower())


@dataclass
class ClassVocabulary:
    names: list
    task: str = "noun"
    _index: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        self.names = [n.strip() for n in self.names]
        canon = [canonicalize(n) for n in self.names]
        if any(not c for c in canon):
            raise ValueError("empty class name")
        if len(set(canon)) != len(canon):
            dupes = sorted({c for c in canon if canon.count(c) > 1})
            raise ValueError(f"duplicate class names after canonicalization: {dupes}")
        self._index = {c: i for i, c in enumerate(canon)}

    def __len__(self):
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def __contains__(self, name):
        return canonicalize(name) in self._index

    def index(self, name: str) -> int:
        try:
            return self._index[canonicalize(name)]
        except KeyError:
            raise KeyError(f"class {name!r} not in {self.task} vocabulary") from None

    def canonical(self) -> list:
        return [canonicalize(n) for n in self.names]

    @classmethod
    def from_file(cls, path, task: str = "noun") -> "ClassVocabulary":
        with open(path, encoding="utf-8") as fh:
            names = [line.strip() for line in fh if line.strip()]
        return cls(names, task)

    def to_file(self, path) -> None:
        with atomic_write(path, "w") as fh:
            fh.write("".join(n + "\n" for n in self.names))


@dataclass(frozen=True)
class Partition:
    shared: frozenset
    novel_a: frozenset
    novel_b: frozenset

    def counts(self) -> tuple:
        return len(self.shared), len(self.novel_a), len(self.novel_b)

    def subset_of(self, name: str, side: str = "b") -> str:
        c = canonicalize(name)
        if c in self.shared:
            return "shared"
        if c in (self.novel_b if side == "b" else self.novel_a):
            return "novel"
        raise KeyError(name)


def partition_shared_novel(a: ClassVocabulary, b: ClassVocabulary) -> Partition:
    """Exact name match after canonicalization (lowercase, trimmed, single spaces)."""
    if a.task != b.task:
        raise TaskMismatchError(f"cannot partition {a.task} against {b.task}")
    ca, cb = set(a.canonical()), set(b.canonical())
    return Partition(frozenset(ca & cb), frozenset(ca - cb), frozenset(cb - ca))


# ---------------------------------------------------------------- frame sampling

def sample_frames(total: int, n: int, mode: str = "uniform", rng=None) -> list:
    """Pick ``n`` frame indices out of ``total``.

    ``uniform`` gives ``floor(i * total / n)``; ``random`` draws sorted indices
    without replacement when ``n <= total`` and with replacement otherwise.
    """
    if total < 1 or n < 1:
        raise ValueError("need total >= 1 and n >= 1")
    if mode == "uniform":
        return [min(i * total // n, total - 1) for i in range(n)]
    if mode != "random":
        raise ValueError(f"unknown sampling mode {mode!r}")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    idx = rng.choice(total, size=n, replace=n > total)
    return sorted(int(i) for i in idx)
