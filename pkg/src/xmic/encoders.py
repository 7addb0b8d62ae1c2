"""Stand-ins for the frozen encoders: a seeded synthetic embedding generator
and a tiny frozen text encoder over hashed tokens."""
from __future__ import annotations

import hashlib
import json
import threading
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ._io import atomic_write
from .datastore import ClassVocabulary, ClipRecord, write_manifest, write_store
from .errors import BadSpecError, DimMismatchError, EmptyClassNameError
from .tensor import Tensor, TransformerBlockParams, l2_normalize, linear, mean_pool, transformer_block
from .tensor.engine import concat


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


# ---------------------------------------------------------------- text classifier

@dataclass
class TextClassifier:
    """Unit-norm class rows plus the raw (pre-normalization) embeddings they came from."""

    rows: Tensor
    vocab: ClassVocabulary
    raw: Tensor | None = None

    def __post_init__(self):
        if self.raw is None:
            self.raw = self.rows

    @property
    def num_classes(self) -> int:
        return self.rows.shape[-2]

    @property
    def dim(self) -> int:
        return self.rows.shape[-1]

    @property
    def matrix(self) -> np.ndarray:
        return self.rows.data


def build_text_classifier(rows, vocab: ClassVocabulary) -> TextClassifier:
    raw = rows if isinstance(rows, Tensor) else Tensor(np.asarray(rows, dtype=np.float64))
    if raw.ndim != 2 or raw.shape[0] != len(vocab):
        raise DimMismatchError(f"{raw.shape} rows for a vocabulary of {len(vocab)} classes")
    return TextClassifier(l2_normalize(raw), vocab, raw)


# ---------------------------------------------------------------- synthetic data

@dataclass
class SyntheticSpec:
    C: int = 16
    D: int = 32
    clips_per_class: int = 50
    frames_per_clip: int = 16
    noise_sigma: float = 0.4
    text_shift: float = 1.5
    hand_shift: float = 0.5
    seed: int = 0
    # extensions beyond the plain shift model; the defaults reproduce it exactly
    visual_shift: float = 0.0
    text_scale: float = 1.0
    visual_scale: float = 1.0

    def validate(self) -> "SyntheticSpec":
        if self.D < 8 or self.D % 8:
            raise BadSpecError("D must be >= 8 and divisible by 8")
        for name in ("C", "clips_per_class", "frames_per_clip"):
            if int(getattr(self, name)) < 1:
                raise BadSpecError(f"{name} must be positive")
        for name in ("noise_sigma", "text_shift", "hand_shift", "visual_shift"):
            if float(getattr(self, name)) < 0:
                raise BadSpecError(f"{name} must be non-negative")
        if self.text_scale <= 0 or self.visual_scale <= 0:
            raise BadSpecError("scales must be positive")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise BadSpecError(f"unknown synthetic spec fields: {sorted(unknown)}")
        return cls(**known).validate()


def class_name(i: int) -> str:
    return f"class {i:02d}"


@dataclass
class SyntheticWorld:
    """Everything fixed by the seed: class prototypes and shift directions."""

    spec: SyntheticSpec
    prototypes: np.ndarray
    hand_dirs: np.ndarray
    text_dir: np.ndarray
    visual_dir: np.ndarray

    @classmethod
    def create(cls, spec: SyntheticSpec, extra_classes: int = 0) -> "SyntheticWorld":
        spec.validate()

        def stream(tag):
            return np.random.default_rng(np.random.SeedSequence([spec.seed, tag]))

        protos = _unit(stream(1).standard_normal((spec.C, spec.D)))
        hands = _unit(stream(2).standard_normal((spec.C, spec.D)))
        text_dir = _unit(stream(3).standard_normal(spec.D))
        visual_dir = _unit(stream(4).standard_normal(spec.D))
        if extra_classes:
            protos = np.vstack([protos, _unit(stream(5).standard_normal((extra_classes, spec.D)))])
            hands = np.vstack([hands, _unit(stream(6).standard_normal((extra_classes, spec.D)))])
        return cls(spec, protos, hands, text_dir, visual_dir)

    def text_embeddings(self, class_ids) -> np.ndarray:
        s = self.spec
        return s.text_scale * _unit(self.prototypes[class_ids] + s.text_shift * self.text_dir)

    def clip_embeddings(self, class_id: int, rng: np.random.Generator, frames: int | None = None):
        s = self.spec
        F = frames or s.frames_per_clip
        center = self.prototypes[class_id] + s.visual_shift * self.visual_dir
        full = _unit(center + s.noise_sigma * rng.standard_normal((F, s.D)))
        hand = _unit(center + s.hand_shift * self.hand_dirs[class_id] + s.noise_sigma * rng.standard_normal((F, s.D)))
        return s.visual_scale * full, s.visual_scale * hand


@dataclass
class SyntheticDataset:
    records: list
    classifier: TextClassifier
    prototypes: np.ndarray
    class_ids: list
    name: str
    split: str
    spec: SyntheticSpec
    labels: np.ndarray = field(default=None)

    @property
    def vocab(self) -> ClassVocabulary:
        return self.classifier.vocab


def synth_generate(spec: SyntheticSpec, split: str = "train", class_ids=None, dataset: str = "synthA",
                   world: SyntheticWorld | None = None) -> SyntheticDataset:
    """Deterministic clips for ``class_ids`` (default ``range(C)``) of one split."""
    spec.validate()
    if class_ids is None:
        class_ids = list(range(spec.C))
    world = world or SyntheticWorld.create(spec, max(0, max(class_ids) + 1 - spec.C))
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7, zlib.crc32(f"{dataset}/{split}".encode())]))
    names = [class_name(c) for c in class_ids]
    records, labels = [], []
    for local, cid in enumerate(class_ids):
        for k in range(spec.clips_per_class):
            full, hand = world.clip_embeddings(cid, rng)
            name = names[local]
            records.append(ClipRecord(f"{dataset}-{split}-{cid:03d}-{k:04d}", full, hand, name, name, dataset))
            labels.append(local)
    vocab = ClassVocabulary(names, "noun")
    classifier = build_text_classifier(world.text_embeddings(class_ids), vocab)
    return SyntheticDataset(records, classifier, world.prototypes[class_ids], list(class_ids), dataset, split, spec,
                            np.asarray(labels))


def synth_cross_domain(spec: SyntheticSpec, shared: int | None = None) -> dict:
    """Train/test splits of domain A plus a test split of domain B.

    B keeps the first ``shared`` classes of A (same prototypes and names) and
    replaces the rest with novel classes. Default ``shared = C // 2``.
    """
    spec.validate()
    shared = spec.C // 2 if shared is None else shared
    if not 0 <= shared <= spec.C:
        raise BadSpecError("shared must lie in [0, C]")
    novel = spec.C - shared
    world = SyntheticWorld.create(spec, novel)
    a_ids = list(range(spec.C))
    b_ids = list(range(shared)) + list(range(spec.C, spec.C + novel))
    return {
        "world": world,
        "train": synth_generate(spec, "train", a_ids, "synthA", world),
        "test": synth_generate(spec, "test", a_ids, "synthA", world),
        "cross": synth_generate(spec, "test", b_ids, "synthB", world),
        "shared": [class_name(i) for i in range(shared)],
    }


def write_synthetic(bundle: dict, out_dir) -> dict:
    """Emit stores, manifests, vocabularies, text embeddings and the JSON sidecar."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key in ("train", "test", "cross"):
        ds = bundle[key]
        write_store(ds.records, out / f"{key}.xmic")
        write_manifest(ds.records, out / f"{key}.jsonl")
        paths[key] = str(out / f"{key}.xmic")
    for key, vocab_name in (("train", "vocab_a"), ("cross", "vocab_b")):
        ds = bundle[key]
        ds.vocab.to_file(out / f"{vocab_name}.txt")
        with atomic_write(out / f"{vocab_name}.npy") as fh:
            np.save(fh, ds.classifier.raw.data.astype(np.float32))
    world = bundle["world"]
    spec = world.spec
    sidecar = {
        "spec": asdict(spec),
        "shifts": {"text_shift": spec.text_shift, "hand_shift": spec.hand_shift, "visual_shift": spec.visual_shift,
                   "noise_sigma": spec.noise_sigma},
        "datasets": {k: {"name": bundle[k].name, "split": bundle[k].split, "class_ids": bundle[k].class_ids,
                         "clips": len(bundle[k].records)} for k in ("train", "test", "cross")},
        "shared_classes": bundle["shared"],
    }
    with atomic_write(out / "synthetic.json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return paths


# ---------------------------------------------------------------- toy text encoder

class ToyTextEncoder:
    """Frozen encoder: hashed token table, two transformer blocks, mean-pool, projection.

    Every encoded sequence adds ``length * width * depth`` to
    :attr:`activations`, which is how the early-fusion cost law is measured.
    """

    def __init__(self, dim: int, seed: int = 0, depth: int = 2, token_dim: int | None = None,
                 dtype=np.float64, block_std: float = 0.2):
        self.dim = dim
        self.token_dim = token_dim or dim
        self.seed = seed
        self.dtype = dtype
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        self.blocks = [TransformerBlockParams.init(self.token_dim, rng, dtype, zero_residual=False,
                                                   std=block_std, requires_grad=False) for _ in range(depth)]
        self.projection = Tensor(rng.normal(0.0, 1.0 / np.sqrt(self.token_dim), (self.token_dim, dim)).astype(dtype))
        self.activations = 0
        self._lock = threading.Lock()
        self._plain: dict = {}
        self._local = threading.local()

    def frozen_tensors(self) -> dict:
        out = {f"block{i}.{k}": v for i, b in enumerate(self.blocks) for k, v in b.named_tensors().items()}
        out["projection"] = self.projection
        return out

    def token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return (rng.standard_normal(self.token_dim) / np.sqrt(self.token_dim)).astype(self.dtype)

    def tokens(self, name: str) -> np.ndarray:
        toks = name.strip().lower().split()
        if not toks:
            raise EmptyClassNameError("class names must contain at least one token")
        return np.stack([self.token_vector(t) for t in toks])

    def _count(self, n_sequences: int, length: int):
        if getattr(self._local, "silent", False):
            return
        with self._lock:
            self.activations += n_sequences * length * self.token_dim * len(self.blocks)

    def encode_plain(self, names) -> np.ndarray:
        """Prompt-free embeddings, cached; a frozen constant, so not counted as activations."""
        key = tuple(names)
        with self._lock:
            hit = self._plain.get(key)
        if hit is None:
            from .tensor import no_grad

            self._local.silent = True
            try:
                with no_grad():
                    hit = self.encode_raw(key).data
            finally:
                self._local.silent = False
            with self._lock:
                self._plain[key] = hit
        return hit

    def encode_raw(self, names, prompts: Tensor | None = None) -> Tensor:
        """Raw class embeddings, differentiable w.r.t. ``prompts`` only.

        ``prompts`` is ``[P, W]`` (shared) giving ``[C, D]``, or ``[B, P, W]``
        (one prompt set per video) giving ``[B, C, D]``.
        """
        names = list(names)
        if not names:
            raise EmptyClassNameError("no class names given")
        toks = [self.tokens(n) for n in names]
        batched = prompts is not None and prompts.ndim == 3
        lead = (prompts.shape[0],) if batched else ()
        by_len: dict = {}
        for i, t in enumerate(toks):
            by_len.setdefault(len(t), []).append(i)
        pieces, order = [], []
        for length, idx in sorted(by_len.items()):
            tok = Tensor(np.stack([toks[i] for i in idx]))  # [n, T, W]
            if prompts is not None and prompts.shape[-2] > 0:
                P = prompts.shape[-2]
                if batched:
                    pr = prompts.reshape(lead[0], 1, P, self.token_dim) * np.ones((1, len(idx), 1, 1), dtype=self.dtype)
                    tk = tok.reshape(1, len(idx), length, self.token_dim) * np.ones(lead + (1, 1, 1), dtype=self.dtype)
                else:
                    pr = prompts.reshape(1, P, self.token_dim) * np.ones((len(idx), 1, 1), dtype=self.dtype)
                    tk = tok
                seq = concat([pr, tk], axis=-2)
            else:
                seq = tok if not batched else tok.reshape(1, len(idx), length, self.token_dim) * np.ones(lead + (1, 1, 1), dtype=self.dtype)
            self._count(int(np.prod(seq.shape[:-2])), seq.shape[-2])
            for b in self.blocks:
                seq = transformer_block(seq, b)
            pieces.append(linear(mean_pool(seq, axis=-2), self.projection))
            order.extend(idx)
        out = concat(pieces, axis=-2) if len(pieces) > 1 else pieces[0]
        inv = np.argsort(order)
        if not np.array_equal(inv, np.arange(len(order))):
            out = out[..., inv, :]
        return out


def toy_text_encode(encoder: ToyTextEncoder, class_names, prompt_vectors: Tensor | None = None,
                    task: str = "noun") -> TextClassifier:
    raw = encoder.encode_raw(class_names, prompt_vectors)
    vocab = ClassVocabulary(list(class_names), task)
    return TextClassifier(l2_normalize(raw), vocab, raw)
