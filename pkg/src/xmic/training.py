"""AdamW and the training loop over embedding stores."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import kernels
from ._io import atomic_write
from .adapters import AdaptedModel, compose, parse_norm_flags, save_checkpoint
from .datastore import ClipRecord, sample_frames
from .encoders import TextClassifier, ToyTextEncoder
from .errors import BadLabelError, BadShapeError, BadSpecError, DimMismatchError
from .tensor import Tensor, backward, cross_entropy

DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass
class TrainConfig:
    lr: float = 1e-6
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    eps: float = 1e-8
    epochs: int = 15
    batch_size: int = 64
    frames: int = 16
    eval_frames: int | None = None
    temperature: float = 0.01
    task: str = "noun"
    strategy: str = "xmic"
    seed: int = 0
    dtype: str = "float32"
    alpha: float = 1.0
    norm: str = "n1"
    spatial: str = "F+H"
    prompts: int = 4
    ratio: float = 0.2
    zero_init: bool = True
    grad_clip: float | None = None
    joint: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)

    def validate(self) -> "TrainConfig":
        b1, b2 = self.betas
        if not (self.lr > 0 and self.temperature > 0):
            raise BadSpecError("lr and temperature must be positive")
        if not 0 < b1 < b2 < 1:
            raise BadSpecError("need 0 < beta1 < beta2 < 1")
        if self.epochs < 0 or self.batch_size < 1 or self.frames < 1:
            raise BadSpecError("epochs >= 0, batch_size >= 1 and frames >= 1 required")
        if self.eval_frames is not None and self.eval_frames < 1:
            raise BadSpecError("eval_frames must be >= 1")
        if self.task not in ("noun", "verb"):
            raise BadSpecError("task must be noun or verb")
        if self.dtype not in DTYPES:
            raise BadSpecError(f"dtype must be one of {sorted(DTYPES)}")
        if self.alpha <= 0:
            raise BadSpecError("alpha must be positive")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise BadSpecError("grad_clip must be positive")
        parse_norm_flags(self.norm)
        return self

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    @property
    def n_eval(self) -> int:
        return self.eval_frames or self.frames

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise BadSpecError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: OptimizerState, config: TrainConfig) -> OptimizerState:
    """Decoupled AdamW, in place on every ``params[name].data``.

    A missing gradient counts as zero, so weight decay still applies.
    """
    state.t += 1
    b1, b2 = config.betas
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.data.dtype)
        if g.shape != p.data.shape:
            raise BadShapeError(f"{name}: gradient {g.shape} vs parameter {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros(p.data.size, dtype=p.data.dtype)
            state.v[name] = np.zeros(p.data.size, dtype=p.data.dtype)
        elif state.m[name].size != p.data.size:
            raise BadShapeError(f"{name}: optimizer state does not match the parameter")
        w = np.ascontiguousarray(p.data).reshape(-1)
        kernels.adamw_update(w, np.ascontiguousarray(g).reshape(-1), state.m[name], state.v[name],
                             config.lr, b1, b2, config.eps, config.weight_decay, state.t)
        p.data = w.reshape(p.data.shape)
    return state


# ---------------------------------------------------------------- batches

@dataclass
class Clip:
    """One training/eval example: the V stream, the V_II stream and a label index."""

    v: ClipRecord
    v2: ClipRecord
    label: int = -1
    label2: int = -1


def make_clips(records_v, classifier: TextClassifier, task: str, records_v2=None, require_labels: bool = True,
               joint=None):
    """Pair V and V_II records by id and resolve labels against ``classifier``'s vocabulary.

    ``joint=(classifier2, task2)`` also resolves the other task's label into ``label2``.
    """
    by_id = None
    if records_v2 is not None:
        by_id = {r.id: r for r in records_v2}
    out = []
    for r in records_v:
        r2 = r if by_id is None else by_id.get(r.id)
        if r2 is None:
            raise DimMismatchError(f"clip {r.id!r} missing from the V_II store")
        if r.dim != classifier.dim or r2.dim != classifier.dim:
            raise DimMismatchError(f"clip {r.id!r}: dim {r.dim}/{r2.dim} vs classifier {classifier.dim}")
        if r.frame_count != r2.frame_count:
            raise DimMismatchError(f"clip {r.id!r}: V has {r.frame_count} frames, V_II {r2.frame_count}")
        label = -1
        if require_labels:
            name = r.label(task)
            if name not in classifier.vocab:
                raise BadLabelError(f"clip {r.id!r}: label {name!r} not in the {task} vocabulary")
            label = classifier.vocab.index(name)
        label2 = -1
        if joint is not None:
            cls2, task2 = joint
            name2 = r.label(task2)
            if name2 not in cls2.vocab:
                raise BadLabelError(f"clip {r.id!r}: label {name2!r} not in the {task2} vocabulary")
            label2 = cls2.vocab.index(name2)
        out.append(Clip(r, r2, label, label2))
    return out


def gather(clips, n: int, mode: str, rng=None, dtype=np.float32):
    """Stack sampled frames: ``(frames_v, frames_v2, hands_v2)``, each ``[B, n, D]``."""
    fv, f2, h2 = [], [], []
    for c in clips:
        idx = sample_frames(c.v.frame_count, n, mode, rng)
        fv.append(c.v.full[idx])
        f2.append(c.v2.full[idx])
        h2.append(c.v2.hand_or_full()[idx])
    return (Tensor(np.stack(fv).astype(dtype)), Tensor(np.stack(f2).astype(dtype)),
            Tensor(np.stack(h2).astype(dtype)))


def batch_loss(model: AdaptedModel, clips, config: TrainConfig, rng=None, mode: str = "random",
               joint_model: AdaptedModel | None = None) -> Tensor:
    """Cross-entropy of a batch; with ``joint_model`` the second task's loss is added."""
    fv, f2, h2 = gather(clips, config.frames, mode, rng, config.np_dtype)
    loss = cross_entropy(model.logits(fv, f2, h2, config.temperature), [c.label for c in clips])
    if joint_model is not None:
        loss = loss + cross_entropy(joint_model.logits(fv, f2, h2, config.temperature), [c.label2 for c in clips])
    return loss


def train_step(clips, model: AdaptedModel, config: TrainConfig, state: OptimizerState, rng,
               joint_model: AdaptedModel | None = None) -> float:
    """One optimizer step on a batch; returns the pre-update loss."""
    params = model.named_parameters()
    for p in params.values():
        p.grad = None
    loss = batch_loss(model, clips, config, rng, joint_model=joint_model)
    if params:
        backward(loss, inputs=list(params.values()))
        grads = {k: p.grad for k, p in params.items()}
        if config.grad_clip is not None:
            total = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values() if g is not None))
            if total > config.grad_clip:
                grads = {k: None if g is None else g * (config.grad_clip / total) for k, g in grads.items()}
        adamw_step(params, grads, state, config)
        for p in params.values():
            p.grad = None
    return float(loss.data)


# ---------------------------------------------------------------- runs

def _streams(seed: int):
    ss = np.random.SeedSequence([seed, 2024])
    init, order, frames = ss.spawn(3)
    return np.random.default_rng(init), np.random.default_rng(order), np.random.default_rng(frames)


def _cast(classifier: TextClassifier, dt) -> TextClassifier:
    return TextClassifier(Tensor(classifier.rows.data.astype(dt)), classifier.vocab,
                          Tensor(classifier.raw.data.astype(dt)))


def build_model(classifier: TextClassifier, config: TrainConfig, rng=None) -> AdaptedModel:
    dt = config.np_dtype
    rng = rng if rng is not None else _streams(config.seed)[0]
    strategies = [s for s in config.strategy.replace("+", ",").split(",") if s]
    encoder = None
    if "early-uni" in strategies or "early-cross" in strategies:
        encoder = ToyTextEncoder(classifier.dim, seed=config.seed, dtype=dt)
    return compose(strategies, _cast(classifier, dt), rng, dtype=dt, encoder=encoder, P=config.prompts, alpha=config.alpha,
                   norm_flags=config.norm, spatial=config.spatial, ratio=config.ratio, zero_init=config.zero_init)


def train_run(train_clips, classifier: TextClassifier, config: TrainConfig, eval_sets: dict | None = None,
              log_path=None, ckpt_path=None, threads: int | None = None, verbose=None,
              joint_classifier: TextClassifier | None = None):
    """Train for ``config.epochs`` epochs; returns ``(model, metrics)``.

    ``eval_sets`` maps a split name to ``(clips, classifier)``; each is
    evaluated after every epoch (and once before training when ``epochs=0``).
    Shuffling and frame sampling use their own seeded streams, so a run is a
    pure function of its inputs and the seed.

    With ``config.joint`` one set of adapter parameters is trained on the
    summed noun and verb losses; ``joint_classifier`` holds the other task's
    class rows and every clip needs ``label2``.
    """
    from .eval import predict, top1_accuracy

    config.validate()
    init_rng, order_rng, frame_rng = _streams(config.seed)
    model = build_model(classifier, config, init_rng)
    joint_model = None
    if config.joint:
        if joint_classifier is None:
            raise BadSpecError("joint training needs the other task's classifier")
        if any(c.label2 < 0 for c in train_clips):
            raise BadSpecError("joint training needs both labels on every clip")
        joint_model = model.with_classifier(_cast(joint_classifier, config.np_dtype))
    state = OptimizerState()
    metrics = []
    step = 0
    n = len(train_clips)
    if n == 0 and config.epochs:
        raise BadSpecError("no training clips")

    def evaluate(row):
        for name, (clips, cls) in (eval_sets or {}).items():
            m = model if cls is None else model.with_classifier(cls)
            preds = predict(m, clips, config.n_eval, threads=threads)
            row[f"acc_{name}"] = top1_accuracy(preds, [c.label for c in clips])
        return row

    if config.epochs == 0:
        metrics.append(evaluate({"epoch": 0, "step": 0, "loss": None, "lr": config.lr}))
    for epoch in range(1, config.epochs + 1):
        perm = order_rng.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            batch = [train_clips[i] for i in perm[start:start + config.batch_size]]
            losses.append(train_step(batch, model, config, state, frame_rng, joint_model))
            step += 1
        row = evaluate({"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": config.lr})
        metrics.append(row)
        if verbose:
            verbose(row)
    if log_path is not None:
        with atomic_write(log_path, "w") as fh:
            for row in metrics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path, {"config": config.to_dict()})
    return model, metrics
