"""X-MIC adapter, baseline adapters (prompts, conditional prompts, bottlenecks),
their composition, and the checkpoint format."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ._io import atomic_write
from .encoders import TextClassifier, ToyTextEncoder
from .errors import (
    BadShapeError,
    DimMismatchError,
    EmptySequenceError,
    FormatError,
    IncompatibleCompositionError,
)
from .tensor import (
    Tensor,
    TransformerBlockParams,
    cosine_logits,
    l2_normalize,
    linear,
    mean_pool,
    relu,
    stack,
    transformer_block,
)

NORM_FLAGS = ("n1", "n2", "n3")
SPATIAL_MODES = ("F+H", "F", "H")
STRATEGIES = ("zero-shot", "early-uni", "early-cross", "xmic", "Tt", "Vv")

CKPT_MAGIC = b"XMICCKPT"
CKPT_VERSION = 1


def parse_norm_flags(spec) -> frozenset:
    """``"n1,n3"`` / ``"none"`` / an iterable of flags -> frozenset."""
    if isinstance(spec, str):
        spec = [] if spec.strip().lower() in ("", "none") else [s.strip() for s in spec.split(",")]
    flags = frozenset(spec)
    bad = flags - set(NORM_FLAGS)
    if bad:
        raise ValueError(f"unknown norm flags {sorted(bad)}")
    return flags


def format_norm_flags(flags) -> str:
    return ",".join(f for f in NORM_FLAGS if f in flags) or "none"


# ---------------------------------------------------------------- X-MIC

@dataclass
class XmicAdapter:
    """Ego-spatial block, two temporal blocks and an output projection.

    ``out_proj`` maps the pooled sequence to a_v. Zero-initialized it makes the
    untrained adapter emit a_v = 0, so conditioning starts at zero-shot.
    ``None`` means identity.
    """

    b_S: TransformerBlockParams
    b_T: tuple
    out_proj: Tensor | None = None
    alpha: float = 1.0
    norm_flags: frozenset = frozenset({"n1"})
    spatial: str = "F+H"

    def __post_init__(self):
        self.b_T = tuple(self.b_T)
        if len(self.b_T) != 2:
            raise BadShapeError("b_T must hold exactly 2 blocks")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        self.norm_flags = parse_norm_flags(self.norm_flags)
        if self.spatial not in SPATIAL_MODES:
            raise ValueError(f"spatial must be one of {SPATIAL_MODES}")
        dims = {self.b_S.dim} | {b.dim for b in self.b_T}
        if self.out_proj is not None:
            dims |= set(self.out_proj.shape)
        if len(dims) != 1:
            raise DimMismatchError(f"inconsistent adapter dims {sorted(dims)}")

    @property
    def dim(self) -> int:
        return self.b_S.dim

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float64, zero_init: bool = True,
             alpha: float = 1.0, norm_flags=("n1",), spatial: str = "F+H",
             out_proj: bool = True) -> "XmicAdapter":
        flags = parse_norm_flags(norm_flags)
        b_S = TransformerBlockParams.init(dim, rng, dtype, zero_residual=zero_init)
        b_T = tuple(TransformerBlockParams.init(dim, rng, dtype, zero_residual=zero_init) for _ in range(2))
        proj = None
        if out_proj:
            # a zero a_v cannot be l2-normalized, so n2 starts from identity
            start = 0.0 if zero_init and "n2" not in flags else 1.0
            proj = Tensor(start * np.eye(dim, dtype=dtype), requires_grad=True)
        return cls(b_S, b_T, proj, alpha, flags, spatial)

    def named_parameters(self, prefix: str = "xmic.") -> dict:
        out = dict(self.b_S.named_tensors(prefix + "b_S."))
        for i, b in enumerate(self.b_T):
            out.update(b.named_tensors(f"{prefix}b_T{i}."))
        if self.out_proj is not None:
            out[prefix + "out_proj"] = self.out_proj
        return out


def ego_spatial_block(frames, hands, b_S: TransformerBlockParams) -> Tensor:
    """Per frame: attend over ``[full; hand]`` and average the two outputs. ``[..., N, D]``."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    hands = hands if isinstance(hands, Tensor) else Tensor(hands)
    if frames.shape != hands.shape:
        raise DimMismatchError(f"frames {frames.shape} vs hands {hands.shape}")
    lead = frames.shape[:-1]
    D = frames.shape[-1]
    seq = stack([frames, hands], axis=-2)  # [..., N, 2, D]
    out = transformer_block(seq, b_S)
    return out.mean(axis=-2).reshape(*lead, D)


def temporal_block(seq, b_T) -> Tensor:
    """Two temporal blocks over the ``N`` axis, then mean-pool. ``[..., N, D] -> [..., D]``."""
    seq = seq if isinstance(seq, Tensor) else Tensor(seq)
    if seq.ndim < 2 or seq.shape[-2] == 0:
        raise EmptySequenceError("temporal block needs at least one frame")
    for block in b_T:
        seq = transformer_block(seq, block)
    return mean_pool(seq, axis=-2)


def xmic_forward(frames_v2, hands_v2, adapter: XmicAdapter) -> Tensor:
    """The X-MIC vector a_v for ``[N, D]`` (or batched ``[B, N, D]``) V_II streams."""
    frames = frames_v2 if isinstance(frames_v2, Tensor) else Tensor(frames_v2)
    hands = hands_v2 if isinstance(hands_v2, Tensor) else Tensor(hands_v2)
    if frames.shape != hands.shape:
        raise DimMismatchError(f"frames {frames.shape} vs hands {hands.shape}")
    if frames.shape[-1] != adapter.dim:
        raise DimMismatchError(f"embedding dim {frames.shape[-1]} vs adapter dim {adapter.dim}")
    if "n1" in adapter.norm_flags:
        frames, hands = l2_normalize(frames), l2_normalize(hands)
    if adapter.spatial == "F":
        hands = frames
    elif adapter.spatial == "H":
        frames = hands
    a_v = temporal_block(ego_spatial_block(frames, hands, adapter.b_S), adapter.b_T)
    if adapter.out_proj is not None:
        a_v = linear(a_v, adapter.out_proj)
    return a_v


def condition_rows(raw_rows, a_v, alpha: float = 1.0, norm_flags=("n1",)) -> Tensor:
    """``normalize(maybe_n3(e_t) + alpha * maybe_n2(a_v))`` for every class row.

    ``raw_rows`` is ``[C, D]`` or ``[B, C, D]``; ``a_v`` is ``[D]`` or ``[B, D]``.
    The outer normalization is always applied.
    """
    flags = parse_norm_flags(norm_flags)
    e = raw_rows if isinstance(raw_rows, Tensor) else Tensor(raw_rows)
    a = a_v if isinstance(a_v, Tensor) else Tensor(a_v)
    if e.shape[-1] != a.shape[-1]:
        raise DimMismatchError(f"class dim {e.shape[-1]} vs a_v dim {a.shape[-1]}")
    if "n3" in flags:
        e = l2_normalize(e)
    if "n2" in flags:
        a = l2_normalize(a)
    if a.ndim == 2:
        a = a.reshape(a.shape[0], 1, a.shape[1])
    return l2_normalize(e + a * float(alpha))


def condition_classifier(classifier: TextClassifier, a_v, adapter: XmicAdapter | None = None, *,
                         alpha: float | None = None, norm_flags=None) -> TextClassifier:
    """Adapted classifier for one video (``a_v`` of shape ``[D]``)."""
    alpha = alpha if alpha is not None else (adapter.alpha if adapter else 1.0)
    flags = norm_flags if norm_flags is not None else (adapter.norm_flags if adapter else ("n1",))
    rows = condition_rows(classifier.raw, a_v, alpha, flags)
    return TextClassifier(rows, classifier.vocab, rows)


# ---------------------------------------------------------------- early fusion

@dataclass
class PromptLearner:
    """``P`` shared token-space vectors prepended to every class name."""

    vectors: Tensor

    @classmethod
    def init(cls, P: int, token_dim: int, rng: np.random.Generator, dtype=np.float64, std: float = 0.02):
        return cls(Tensor(rng.normal(0.0, std, (P, token_dim)).astype(dtype), requires_grad=True))

    @property
    def P(self) -> int:
        return self.vectors.shape[0]

    def num_parameters(self) -> int:
        return int(self.vectors.size)

    def named_parameters(self, prefix: str = "prompts.") -> dict:
        return {prefix + "vectors": self.vectors}


@dataclass
class ConditionalPromptAdapter:
    """Prompt vectors plus a linear map from the pooled video embedding to token space.

    The mapped vector is added to every prompt vector; a zero map gives back
    the unconditional prompts.
    """

    learner: PromptLearner
    weight: Tensor
    bias: Tensor

    @classmethod
    def init(cls, P: int, dim: int, token_dim: int, rng: np.random.Generator, dtype=np.float64,
             zero_init: bool = True, std: float = 0.02):
        learner = PromptLearner.init(P, token_dim, rng, dtype, std)
        w = np.zeros((dim, token_dim)) if zero_init else rng.normal(0.0, std, (dim, token_dim))
        return cls(learner, Tensor(w.astype(dtype), requires_grad=True),
                   Tensor(np.zeros(token_dim, dtype=dtype), requires_grad=True))

    def named_parameters(self, prefix: str = "cocoop.") -> dict:
        out = self.learner.named_parameters(prefix)
        out[prefix + "weight"] = self.weight
        out[prefix + "bias"] = self.bias
        return out

    def prompts_for(self, videos) -> Tensor:
        """``[B, P, W]`` prompt sets, one per pooled video ``[B, D]``."""
        v = videos if isinstance(videos, Tensor) else Tensor(videos)
        if v.ndim != 2 or v.shape[0] < 1:
            raise BadShapeError("video batch must be [B, D] with B >= 1")
        if v.shape[1] != self.weight.shape[0]:
            raise DimMismatchError(f"video dim {v.shape[1]} vs map input {self.weight.shape[0]}")
        cond = linear(v, self.weight, self.bias)  # [B, W]
        P, W = self.learner.vectors.shape
        return self.learner.vectors.reshape(1, P, W) + cond.reshape(v.shape[0], 1, W)


def _anchored(encoder: ToyTextEncoder, names, prompts: Tensor, base_raw: Tensor | None) -> Tensor:
    """Encode with prompts; if a base embedding is given, shift it by the prompt-induced change."""
    if prompts.shape[-2] == 0 and base_raw is not None:
        if prompts.ndim == 3:
            return base_raw.reshape(1, *base_raw.shape) * np.ones((prompts.shape[0], 1, 1), dtype=base_raw.dtype)
        return base_raw
    enc = encoder.encode_raw(names, prompts)
    if base_raw is None:
        return enc
    plain = encoder.encode_plain(names)
    return enc + (base_raw.data - plain)


def prompt_forward(learner: PromptLearner, encoder: ToyTextEncoder, vocab, base: TextClassifier | None = None
                   ) -> TextClassifier:
    """Classifier from the frozen encoder with shared learned prompts.

    With ``base`` given, its raw embeddings are moved by
    ``enc(prompts, names) - enc(names)``: P=0 returns ``base`` exactly.
    """
    raw = _anchored(encoder, list(vocab), learner.vectors, base.raw if base is not None else None)
    return TextClassifier(l2_normalize(raw), vocab, raw)


def cocoop_forward(adapter: ConditionalPromptAdapter, encoder: ToyTextEncoder, vocab, video_batch,
                   base: TextClassifier | None = None) -> TextClassifier:
    """One classifier per video; rows are ``[B, C, D]``. Every (video, class) pair is an encoder pass."""
    prompts = adapter.prompts_for(video_batch)
    raw = _anchored(encoder, list(vocab), prompts, base.raw if base is not None else None)
    return TextClassifier(l2_normalize(raw), vocab, raw)


# ---------------------------------------------------------------- late fusion

@dataclass
class BottleneckAdapter:
    """``normalize(r*x + (1-r)*Up(relu(Down(x))))`` with a D/4 bottleneck."""

    down: Tensor
    up: Tensor
    ratio: float = 0.2

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("blend ratio must lie in [0, 1]")
        if self.down.shape[1] != self.up.shape[0] or self.down.shape[0] != self.up.shape[1]:
            raise DimMismatchError(f"down {self.down.shape} / up {self.up.shape} do not compose")

    @property
    def dim(self) -> int:
        return self.down.shape[0]

    @classmethod
    def init(cls, dim: int, rng: np.random.Generator, dtype=np.float64, ratio: float = 0.2, std: float = 0.02):
        hidden = max(1, dim // 4)
        return cls(Tensor(rng.normal(0.0, std, (dim, hidden)).astype(dtype), requires_grad=True),
                   Tensor(rng.normal(0.0, std, (hidden, dim)).astype(dtype), requires_grad=True), ratio)

    def named_parameters(self, prefix: str) -> dict:
        return {prefix + "down": self.down, prefix + "up": self.up}


def bottleneck_forward(adapter: BottleneckAdapter, x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-1] != adapter.dim:
        raise DimMismatchError(f"input dim {x.shape[-1]} vs adapter dim {adapter.dim}")
    r = adapter.ratio
    new = linear(relu(linear(x, adapter.down)), adapter.up)
    return l2_normalize(x * r + new * (1.0 - r))


# ---------------------------------------------------------------- composition

@dataclass
class AdaptedModel:
    """A frozen classifier plus any combination of the adapters above."""

    classifier: TextClassifier
    strategies: tuple = ("xmic",)
    xmic: XmicAdapter | None = None
    prompts: PromptLearner | None = None
    cocoop: ConditionalPromptAdapter | None = None
    text_adapter: BottleneckAdapter | None = None
    video_adapter: BottleneckAdapter | None = None
    encoder: ToyTextEncoder | None = None
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.classifier.dim

    def named_parameters(self) -> dict:
        out = {}
        if self.xmic is not None:
            out.update(self.xmic.named_parameters())
        if self.prompts is not None:
            out.update(self.prompts.named_parameters())
        if self.cocoop is not None:
            out.update(self.cocoop.named_parameters())
        if self.text_adapter is not None:
            out.update(self.text_adapter.named_parameters("Tt."))
        if self.video_adapter is not None:
            out.update(self.video_adapter.named_parameters("Vv."))
        return out

    def frozen_tensors(self) -> dict:
        out = {"classifier.raw": self.classifier.raw}
        if self.encoder is not None:
            out.update({"encoder." + k: v for k, v in self.encoder.frozen_tensors().items()})
        return out

    def with_classifier(self, classifier: TextClassifier) -> "AdaptedModel":
        """Same trained parameters, different vocabulary (cross-dataset evaluation)."""
        if classifier.dim != self.dim:
            raise DimMismatchError(f"classifier dim {classifier.dim} vs model dim {self.dim}")
        return AdaptedModel(classifier, self.strategies, self.xmic, self.prompts, self.cocoop,
                            self.text_adapter, self.video_adapter, self.encoder, dict(self.meta))

    # -- forward pieces

    def video_embedding(self, frames_v) -> Tensor:
        """ē_v: normalized mean of normalized V-stream frames, ``[B, N, D] -> [B, D]``."""
        ev = l2_normalize(mean_pool(l2_normalize(frames_v), axis=-2))
        if self.video_adapter is not None:
            ev = bottleneck_forward(self.video_adapter, ev)
        return ev

    def text_raw(self, ev: Tensor) -> Tensor:
        """Raw class embeddings after the early-fusion and Tt stages: ``[C, D]`` or ``[B, C, D]``."""
        base = self.classifier
        if self.cocoop is not None:
            raw = cocoop_forward(self.cocoop, self.encoder, base.vocab, ev.detach(), base).raw
        elif self.prompts is not None:
            raw = prompt_forward(self.prompts, self.encoder, base.vocab, base).raw
        else:
            raw = base.raw
        if self.text_adapter is not None:
            # keep each row's magnitude so the n3 flag still means something
            norms = np.sqrt(np.sum(raw.data ** 2, axis=-1, keepdims=True))
            raw = bottleneck_forward(self.text_adapter, raw) * norms
        return raw

    def adapted_rows(self, ev: Tensor, frames_v2=None, hands_v2=None) -> Tensor:
        raw = self.text_raw(ev)
        if self.xmic is None:
            return l2_normalize(raw)
        a_v = xmic_forward(frames_v2, hands_v2, self.xmic)
        return condition_rows(raw, a_v, self.xmic.alpha, self.xmic.norm_flags)

    def logits(self, frames_v, frames_v2=None, hands_v2=None, temperature: float = 0.01) -> Tensor:
        """Cosine logits ``[B, C]`` for a batch of sampled clips."""
        frames_v = frames_v if isinstance(frames_v, Tensor) else Tensor(frames_v)
        if frames_v.shape[-1] != self.dim:
            raise DimMismatchError(f"embedding dim {frames_v.shape[-1]} vs classifier dim {self.dim}")
        ev = self.video_embedding(frames_v)
        rows = self.adapted_rows(ev, frames_v2, hands_v2)
        return cosine_logits(ev, rows, temperature, check=False)


def compose(strategies, classifier: TextClassifier, rng: np.random.Generator, *, dtype=np.float64,
            encoder: ToyTextEncoder | None = None, P: int = 4, alpha: float = 1.0, norm_flags=("n1",),
            spatial: str = "F+H", ratio: float = 0.2, zero_init: bool = True) -> AdaptedModel:
    """Build an :class:`AdaptedModel` from an ordered strategy list.

    Text path: (prompts ->) frozen encode -> (Tt) -> X-MIC conditioning.
    Video path: frozen encode -> (Vv).
    """
    if isinstance(strategies, str):
        strategies = [s for s in strategies.replace("+", ",").split(",") if s]
    strategies = tuple(strategies)
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise IncompatibleCompositionError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
    if len(set(strategies)) != len(strategies):
        raise IncompatibleCompositionError("a strategy may appear only once")
    if "zero-shot" in strategies and len(strategies) > 1:
        raise IncompatibleCompositionError("zero-shot cannot be combined with adapters")
    if "early-uni" in strategies and "early-cross" in strategies:
        raise IncompatibleCompositionError("early-uni and early-cross both own the prompt vectors")
    D = classifier.dim
    early = "early-uni" in strategies or "early-cross" in strategies
    if early:
        if encoder is None:
            raise IncompatibleCompositionError("early fusion needs a text encoder")
        if encoder.dim != D:
            raise IncompatibleCompositionError(f"encoder dim {encoder.dim} vs classifier dim {D}")
    model = AdaptedModel(classifier, strategies, encoder=encoder if early else None,
                         meta={"P": P if early else 0, "ratio": ratio})
    for s in strategies:
        if s == "xmic":
            model.xmic = XmicAdapter.init(D, rng, dtype, zero_init, alpha, norm_flags, spatial)
        elif s == "early-uni":
            model.prompts = PromptLearner.init(P, encoder.token_dim, rng, dtype)
        elif s == "early-cross":
            model.cocoop = ConditionalPromptAdapter.init(P, D, encoder.token_dim, rng, dtype, zero_init)
        elif s == "Tt":
            model.text_adapter = BottleneckAdapter.init(D, rng, dtype, ratio)
        elif s == "Vv":
            model.video_adapter = BottleneckAdapter.init(D, rng, dtype, ratio)
    return model


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(model: AdaptedModel, path, extra: dict | None = None) -> None:
    params = model.named_parameters()
    meta = {
        "D": model.dim,
        "strategies": list(model.strategies),
        "alpha": model.xmic.alpha if model.xmic else None,
        "norm_flags": format_norm_flags(model.xmic.norm_flags) if model.xmic else None,
        "spatial": model.xmic.spatial if model.xmic else None,
        "xmic_out_proj": bool(model.xmic and model.xmic.out_proj is not None),
        "P": model.meta.get("P", 0),
        "ratio": model.meta.get("ratio", 0.2),
        "encoder": ({"dim": model.encoder.dim, "token_dim": model.encoder.token_dim, "seed": model.encoder.seed,
                     "depth": len(model.encoder.blocks)} if model.encoder is not None else None),
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with atomic_write(path) as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for name in sorted(params):
            data = np.ascontiguousarray(params[name].data, dtype="<f4").tobytes()
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<Q", len(data)))
            fh.write(data)


def read_checkpoint(path) -> tuple:
    """``(metadata, {name: float32 array})``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not an xmic checkpoint")
    try:
        version, n = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 16
        meta = json.loads(buf[pos:pos + n].decode("utf-8"))
        pos += n
        arrays = {}
        while pos < len(buf):
            (klen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + klen].decode("utf-8")
            pos += klen
            (dlen,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + dlen > len(buf):
                raise FormatError("truncated checkpoint")
            arrays[name] = np.frombuffer(buf[pos:pos + dlen], dtype="<f4").reshape(meta["shapes"][name]).copy()
            pos += dlen
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    if set(arrays) != set(meta["shapes"]):
        raise FormatError("checkpoint parameter set does not match its metadata")
    return meta, arrays


def load_checkpoint(path, classifier: TextClassifier, dtype=np.float64) -> AdaptedModel:
    """Rebuild the model described by a checkpoint around ``classifier``."""
    meta, arrays = read_checkpoint(path)
    if meta["D"] != classifier.dim:
        raise DimMismatchError(f"checkpoint D={meta['D']} vs classifier dim {classifier.dim}")
    enc = None
    if meta.get("encoder"):
        e = meta["encoder"]
        enc = ToyTextEncoder(e["dim"], seed=e["seed"], depth=e["depth"], token_dim=e["token_dim"], dtype=dtype)
    model = compose(meta["strategies"], classifier, np.random.default_rng(0), dtype=dtype, encoder=enc,
                    P=meta.get("P", 0), alpha=meta["alpha"] or 1.0,
                    norm_flags=parse_norm_flags(meta["norm_flags"] or "n1"), spatial=meta["spatial"] or "F+H",
                    ratio=meta.get("ratio", 0.2))
    if model.xmic is not None and not meta.get("xmic_out_proj", True):
        model.xmic.out_proj = None
    load_parameters(model, arrays)
    return model


def load_parameters(model: AdaptedModel, arrays: dict) -> None:
    params = model.named_parameters()
    if set(params) != set(arrays):
        raise FormatError(f"parameter names differ: {sorted(set(params) ^ set(arrays))}")
    for k, t in params.items():
        if tuple(t.shape) != tuple(arrays[k].shape):
            raise FormatError(f"{k}: shape {arrays[k].shape} vs {t.shape}")
        t.data = arrays[k].astype(t.dtype)
