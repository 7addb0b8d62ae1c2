"""Prediction, top-1 accuracy, harmonic means, the cross-dataset report and
the activation-cost profile."""
from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapters import AdaptedModel, compose
from .datastore import Partition, sample_frames
from .encoders import TextClassifier, ToyTextEncoder, build_text_classifier, class_name
from .errors import DimMismatchError, EmptyInputError, NegativeInputError, VocabularyMismatchError
from .tensor import Tensor, no_grad

CHUNK = 64


def worker_count(threads: int | None = None) -> int:
    if threads is None:
        env = os.environ.get("XMIC_THREADS", "")
        threads = int(env) if env.strip() else (os.cpu_count() or 1)
    return max(1, int(threads))


def _frames(clips, n: int, dtype):
    fv, f2, h2 = [], [], []
    for c in clips:
        idx = sample_frames(c.v.frame_count, n, "uniform")
        fv.append(c.v.full[idx])
        f2.append(c.v2.full[idx])
        h2.append(c.v2.hand_or_full()[idx])
    return (Tensor(np.stack(fv).astype(dtype)), Tensor(np.stack(f2).astype(dtype)),
            Tensor(np.stack(h2).astype(dtype)))


def scores(model: AdaptedModel, clips, n_frames: int = 16) -> np.ndarray:
    """Cosine similarities ``[B, C]`` against each clip's adapted classifier."""
    dt = model.classifier.raw.dtype
    with no_grad():
        fv, f2, h2 = _frames(clips, n_frames, dt)
        ev = model.video_embedding(fv).data
        rows = model.adapted_rows(Tensor(ev), f2, h2).data
    # einsum's plain loop (no BLAS blocking) gives bit-equal scores for equal rows,
    # so exact ties really resolve to the lowest index
    if rows.ndim == 2:
        return np.einsum("cd,bd->bc", rows, ev)
    return np.einsum("bcd,bd->bc", rows, ev)


def classify_clip(clip, model: AdaptedModel, n_frames: int = 16):
    """``(predicted index, score vector)``; ties go to the lowest class index."""
    if clip.v.dim != model.dim:
        raise DimMismatchError(f"clip dim {clip.v.dim} vs classifier dim {model.dim}")
    s = scores(model, [clip], n_frames)[0]
    return int(np.argmax(s)), s


def predict(model: AdaptedModel, clips, n_frames: int = 16, threads: int | None = None) -> np.ndarray:
    """Argmax predictions for every clip.

    Clips are cut into fixed chunks independent of the worker count, so the
    output does not depend on ``threads`` / ``XMIC_THREADS``.
    """
    clips = list(clips)
    if not clips:
        return np.zeros(0, dtype=np.int64)
    if clips[0].v.dim != model.dim:
        raise DimMismatchError(f"clip dim {clips[0].v.dim} vs classifier dim {model.dim}")
    chunks = [clips[i:i + CHUNK] for i in range(0, len(clips), CHUNK)]
    workers = min(worker_count(threads), len(chunks))

    def run(chunk):
        return np.argmax(scores(model, chunk, n_frames), axis=1)

    if workers == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    return np.concatenate(parts).astype(np.int64)


def top1_accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds).reshape(-1), np.asarray(labels).reshape(-1)
    if len(preds) == 0:
        raise EmptyInputError("accuracy of an empty prediction set")
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions vs {len(labels)} labels")
    return 100.0 * float(np.sum(preds == labels)) / len(preds)


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise NegativeInputError("harmonic mean of negative values")
    return 0.0 if a + b == 0 else 2.0 * a * b / (a + b)


# ---------------------------------------------------------------- report

@dataclass
class EvalReport:
    """Accuracy cells keyed ``(dataset, task, subset)`` plus harmonic means."""

    cells: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    hms: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def set(self, dataset: str, task: str, subset: str, acc: float, n: int):
        self.cells[(dataset, task, subset)] = acc
        self.counts[(dataset, task, subset)] = n

    def get(self, dataset: str, task: str, subset: str = "all"):
        return self.cells.get((dataset, task, subset))

    def add_hm(self, name: str, a_key: tuple, b_key: tuple):
        if a_key in self.cells and b_key in self.cells:
            self.hms[name] = {"a": list(a_key), "b": list(b_key),
                              "value": harmonic_mean(self.cells[a_key], self.cells[b_key])}

    def to_dict(self) -> dict:
        return {
            "cells": [{"dataset": d, "task": t, "subset": s, "accuracy": acc, "clips": self.counts[(d, t, s)]}
                      for (d, t, s), acc in sorted(self.cells.items())],
            "hm": {k: self.hms[k] for k in sorted(self.hms)},
            "meta": self.meta,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def row(self) -> dict:
        """The flat within / cross / hm (/ shared / novel / hm) row."""
        t = self.meta.get("task", "noun")
        a, b = self.meta.get("within", "A"), self.meta.get("cross", "B")
        out = {"within": self.get(a, t), "cross": self.get(b, t), "hm": self.hms.get("within_cross", {}).get("value"),
               "shared": self.get(b, t, "shared"), "novel": self.get(b, t, "novel"),
               "hm_shared_novel": self.hms.get("shared_novel", {}).get("value")}
        return out

    def to_table(self) -> str:
        return format_table([dict(self.row(), variant=self.meta.get("variant", ""))])

    def to_csv(self) -> str:
        return format_csv([dict(self.row(), variant=self.meta.get("variant", ""))])

    def render(self, fmt: str) -> str:
        return {"json": self.to_json, "table": self.to_table, "csv": self.to_csv}[fmt]()


COLUMNS = ("variant", "within", "cross", "hm", "shared", "novel", "hm_shared_novel")


def _fmt(v) -> str:
    return "-" if v is None else (f"{v:.2f}" if isinstance(v, float) else str(v))


def format_table(rows) -> str:
    cols = [c for c in COLUMNS if any(c in r for r in rows)]
    text = [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(t[i]) for t in text)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cols, widths)))]
    for t in text:
        lines.append("  ".join(v.ljust(w) if i == 0 else v.rjust(w) for i, (v, w) in enumerate(zip(t, widths))))
    return "\n".join(lines) + "\n"


def format_csv(rows) -> str:
    cols = [c for c in COLUMNS if any(c in r for r in rows)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow(["" if r.get(c) is None else (f"{r[c]:.4f}" if isinstance(r[c], float) else r[c]) for c in cols])
    return buf.getvalue()


def evaluate_cross_dataset(model: AdaptedModel, within_clips, cross_clips, classifier_b: TextClassifier,
                           partition: Partition, task: str = "noun", n_frames: int = 16, names=("A", "B"),
                           threads: int | None = None, restrict_rows: bool = False) -> EvalReport:
    """Within-dataset accuracy on A, cross-dataset accuracy on B, shared/novel split on B.

    B is classified with its full vocabulary. With ``restrict_rows`` each
    subset is instead classified against only that subset's classes.
    """
    vocab_a, vocab_b = model.classifier.vocab, classifier_b.vocab
    if set(vocab_a.canonical()) != set(partition.shared | partition.novel_a) or \
            set(vocab_b.canonical()) != set(partition.shared | partition.novel_b):
        raise VocabularyMismatchError("partition does not describe the two vocabularies")
    if classifier_b.dim != model.dim:
        raise VocabularyMismatchError(f"classifier B dim {classifier_b.dim} vs model dim {model.dim}")
    name_a, name_b = names
    report = EvalReport(meta={"task": task, "within": name_a, "cross": name_b, "frames": n_frames,
                              "restrict_rows": restrict_rows})
    if within_clips:
        preds = predict(model, within_clips, n_frames, threads)
        report.set(name_a, task, "all", top1_accuracy(preds, [c.label for c in within_clips]), len(within_clips))
    if cross_clips:
        model_b = model.with_classifier(classifier_b)
        labels = np.array([c.label for c in cross_clips])
        subset = np.array([partition.subset_of(vocab_b.names[l], "b") for l in labels])
        preds = predict(model_b, cross_clips, n_frames, threads)
        report.set(name_b, task, "all", top1_accuracy(preds, labels), len(cross_clips))
        for sub in ("shared", "novel"):
            mask = subset == sub
            if not mask.any():
                continue
            clips = [c for c, m in zip(cross_clips, mask) if m]
            if restrict_rows:
                keep = [i for i, n in enumerate(vocab_b.names) if partition.subset_of(n, "b") == sub]
                sub_cls = _subset_classifier(classifier_b, keep)
                remap = {old: new for new, old in enumerate(keep)}
                p = predict(model.with_classifier(sub_cls), clips, n_frames, threads)
                acc = top1_accuracy(p, [remap[c.label] for c in clips])
            else:
                acc = top1_accuracy(preds[mask], labels[mask])
            report.set(name_b, task, sub, acc, int(mask.sum()))
    report.add_hm("within_cross", (name_a, task, "all"), (name_b, task, "all"))
    report.add_hm("shared_novel", (name_b, task, "shared"), (name_b, task, "novel"))
    return report


def _subset_classifier(cls: TextClassifier, keep) -> TextClassifier:
    from .datastore import ClassVocabulary

    vocab = ClassVocabulary([cls.vocab.names[i] for i in keep], cls.vocab.task)
    return TextClassifier(Tensor(cls.rows.data[keep]), vocab, Tensor(cls.raw.data[keep]))


# ---------------------------------------------------------------- cost profile

def activation_cost_profile(strategy: str, B: int, C: int, P: int, D: int, N: int, seed: int = 0) -> dict:
    """Measure conditioning-path activations of one real forward pass.

    ``text_encoder_activations`` is read from the toy encoder's counter;
    ``class_rows`` is the number of per-class vectors the text path
    materializes (``C`` when shared across the batch, ``B*C`` when
    per-video).
    """
    if min(B, C, D, N) < 1 or P < 0:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    names = [class_name(i) for i in range(C)]
    encoder = ToyTextEncoder(D, seed=seed)
    classifier = build_text_classifier(encoder.encode_plain(names), _vocab(names))
    model = compose(strategy, classifier, rng, encoder=encoder, P=P)
    frames = rng.standard_normal((B, N, D))
    hands = rng.standard_normal((B, N, D))
    encoder.activations = 0
    with no_grad():
        ev = model.video_embedding(Tensor(frames))
        rows = model.text_raw(ev)
        text_acts = encoder.activations
        adapted = model.adapted_rows(ev, Tensor(frames), Tensor(hands))
    return {
        "strategy": strategy, "B": B, "C": C, "P": P, "D": D, "N": N,
        "text_encoder_activations": int(text_acts),
        "class_rows": int(np.prod(rows.shape[:-1])),
        "adapted_rows": int(np.prod(adapted.shape[:-1])),
    }


def _vocab(names):
    from .datastore import ClassVocabulary

    return ClassVocabulary(names)
