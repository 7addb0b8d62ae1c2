"""Straight-line reference implementations shared by the test modules."""
import math

import numpy as np

from xmic.tensor import TransformerBlockParams


def attention_oracle(x, p):
    """Per-head, per-query loop with explicit softmax."""
    L, D = x.shape
    H = 8
    dh = D // H
    q = x @ p.w_q.data + p.b_q.data
    k = x @ p.w_k.data + p.b_k.data
    v = x @ p.w_v.data + p.b_v.data
    concat = np.zeros((L, D))
    for h in range(H):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(L):
            scores = [sum(q[i, c] * k[j, c] for c in range(h * dh, (h + 1) * dh)) / math.sqrt(dh) for j in range(L)]
            m = max(scores)
            w = [math.exp(s - m) for s in scores]
            tot = sum(w)
            for j in range(L):
                concat[i, cols] += (w[j] / tot) * v[j, cols]
    return concat @ p.w_o.data + p.b_o.data


def layer_norm_oracle(x, g, b, eps=1e-5):
    out = np.empty_like(x)
    for i, row in enumerate(x.reshape(-1, x.shape[-1])):
        mu = sum(row) / len(row)
        var = sum((r - mu) ** 2 for r in row) / len(row)
        out.reshape(-1, x.shape[-1])[i] = [(r - mu) / math.sqrt(var + eps) for r in row]
    return out * g + b


def block_oracle(x, p):
    h = x + attention_oracle(layer_norm_oracle(x, p.ln1_gain.data, p.ln1_bias.data), p)
    z = layer_norm_oracle(h, p.ln2_gain.data, p.ln2_bias.data) @ p.w_fc.data + p.b_fc.data
    z = z / (1.0 + np.exp(-1.702 * z))
    return h + z @ p.w_proj.data + p.b_proj.data


def random_block(rng, D, std=0.3):
    p = TransformerBlockParams.init(D, rng, zero_residual=False, std=std)
    for name, t in p.named_tensors().items():
        if t.ndim == 1:
            t.data[...] = rng.normal(0, 0.1, size=t.shape) + (1.0 if "gain" in name else 0.0)
    return p


def unit(v):
    return v / math.sqrt(float(np.sum(v * v)))


def xmic_oracle(frames, hands, adapter):
    """a_v with explicit per-frame and per-block loops."""
    flags = adapter.norm_flags
    fr = [unit(f) if "n1" in flags else f for f in frames]
    ha = [unit(h) if "n1" in flags else h for h in hands]
    if adapter.spatial == "F":
        ha = fr
    elif adapter.spatial == "H":
        fr = ha
    seq = []
    for f, h in zip(fr, ha):
        out = block_oracle(np.stack([f, h]), adapter.b_S)
        seq.append((out[0] + out[1]) / 2.0)
    seq = np.stack(seq)
    for blk in adapter.b_T:
        seq = block_oracle(seq, blk)
    a_v = sum(seq) / len(seq)
    if adapter.out_proj is not None:
        a_v = a_v @ adapter.out_proj.data
    return a_v


def predict_oracle(frames_v, frames_v2, hands_v2, raw_rows, adapter, alpha=None):
    """Conditioned prediction for one clip: argmax over normalize(e_t + alpha*a_v) . e_v, lowest index on ties."""
    ev = unit(sum(unit(f) for f in frames_v) / len(frames_v))
    a_v = xmic_oracle(frames_v2, hands_v2, adapter)
    alpha = adapter.alpha if alpha is None else alpha
    if "n2" in adapter.norm_flags:
        a_v = unit(a_v)
    best, best_score = 0, -math.inf
    for t, e in enumerate(raw_rows):
        if "n3" in adapter.norm_flags:
            e = unit(e)
        score = float(unit(e + alpha * a_v) @ ev)
        if score > best_score:
            best, best_score = t, score
    return best
