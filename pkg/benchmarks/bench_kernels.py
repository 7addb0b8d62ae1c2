"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--end-to-end]

Shapes mirror training: ego-spatial attention runs over many length-2
groups, temporal attention over length-16 groups. ``--end-to-end`` also
times one X-MIC training epoch with the routed backend and with
``XMIC_PURE_PYTHON=1`` (each in a fresh interpreter).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from xmic import kernels

CASES = {
    # name: (G groups, L tokens, dh head width)
    "attn spatial (B=64,N=16,D=32)": (64 * 16 * 8, 2, 4),
    "attn temporal (B=64,N=16,D=32)": (64 * 8, 16, 4),
    "attn temporal (B=64,N=16,D=512)": (64 * 8, 16, 64),
}


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


EPOCH = """
import time
from xmic.encoders import SyntheticSpec, synth_generate
from xmic.training import TrainConfig, make_clips, train_run
ds = synth_generate(SyntheticSpec(visual_shift=4.0))
clips = make_clips(ds.records, ds.classifier, "noun")
train_run(clips, ds.classifier, TrainConfig(lr=1e-3, epochs=1))
t0 = time.perf_counter()
train_run(clips, ds.classifier, TrainConfig(lr=1e-3, epochs=3))
print((time.perf_counter() - t0) / 3 * 1e3)
"""


def epoch_ms(pure: bool) -> float:
    env = dict(os.environ, XMIC_PURE_PYTHON="1" if pure else "0")
    out = subprocess.run([sys.executable, "-c", EPOCH], env=env, capture_output=True, text=True, check=True)
    return float(out.stdout.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    parser.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    parser.add_argument("--end-to-end", action="store_true", help="also time a training epoch per backend")
    args = parser.parse_args()
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled backend not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    dt = np.dtype(args.dtype)
    rows = []
    for name, (G, L, dh) in CASES.items():
        q, k, v, g = (rng.standard_normal((G, L, dh)).astype(dt) for _ in range(4))
        times = {}
        for bname, mod in backends.items():
            out, probs = mod.attention_forward(q, k, v, 0.5)
            fwd = bench(lambda: mod.attention_forward(q, k, v, 0.5), args.repeat)
            bwd = bench(lambda: mod.attention_backward(q, k, v, np.asarray(probs), g, 0.5), args.repeat)
            times[bname] = fwd + bwd
        rows.append((name + " fwd+bwd", times))
    x = rng.standard_normal((64 * 16 * 2, 32)).astype(dt)
    gx = rng.standard_normal(x.shape).astype(dt)
    times = {}
    for bname, mod in backends.items():
        xhat, rstd = mod.layer_norm_forward(x, 1e-5)
        fwd = bench(lambda: mod.layer_norm_forward(x, 1e-5), args.repeat)
        bwd = bench(lambda: mod.layer_norm_backward(np.asarray(xhat), np.asarray(rstd), gx), args.repeat)
        times[bname] = fwd + bwd
    rows.append(("layer norm [2048, 32] fwd+bwd", times))
    n = 3 * 16 * 32 * 32 + 1000
    times = {}
    for bname, mod in backends.items():
        w, gw, m, vv = (rng.standard_normal(n).astype(dt) for _ in range(4))
        vv = np.abs(vv)
        times[bname] = bench(lambda: mod.adamw_update(w, gw, m, vv, 1e-3, 0.9, 0.999, 1e-8, 0.01, 3), args.repeat)
    rows.append((f"adamw update [{n}]", times))
    if args.end_to_end and "cython" in backends:
        rows.append(("train epoch (800 clips, routed vs pure)", {"python": epoch_ms(True), "cython": epoch_ms(False)}))

    names = list(backends)
    print(f"{'kernel':<48}" + "".join(f"{b + ' ms':>12}" for b in names) + ("  speedup" if len(names) > 1 else ""))
    for label, t in rows:
        line = f"{label:<48}" + "".join(f"{t[b]:>12.3f}" for b in names)
        if "cython" in t:
            line += f"  {t['python'] / t['cython']:>6.2f}x"
        print(line)


if __name__ == "__main__":
    main()
