"""Compare the JIT and pure-numpy convolution backends.

Times a handful of layer shapes typical of the detector, then one full
model forward, under FACEKIT_BACKEND=numba and =numpy. Run from the repo
root:

    python3 benchmarks/bench_backends.py [--imgsz 160] [--reps 5]

The first numba call includes compilation; a warmup pass per shape keeps
that out of the timings.
"""

import argparse
import os
import statistics
import time

import numpy as np

from facekit.netgraph import build_model, model_config
from facekit.tensor.backend import NUMBA_AVAILABLE
from facekit.tensor.ops import conv2d
from facekit.tensor.types import ConvParams

# (label, in_ch, out_ch, k, stride, groups, side)
LAYER_SHAPES = [
    ("stem 3>16 k3 s2", 3, 16, 3, 2, 1, 160),
    ("mid 32>32 k3", 32, 32, 3, 1, 1, 40),
    ("deep 128>128 k3", 128, 128, 3, 1, 1, 10),
    ("depthwise 64 k3", 64, 64, 3, 1, 64, 20),
    ("pointwise 64>128", 64, 128, 1, 1, 1, 20),
]


def _median_ms(fn, reps):
    fn()  # warmup: numba compiles here, numpy warms caches
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        fn()
        times.append((time.perf_counter() - start) * 1e3)
    return statistics.median(times)


def bench_layers(reps):
    rng = np.random.default_rng(0)
    rows = []
    for label, cin, cout, k, stride, groups, side in LAYER_SHAPES:
        x = rng.standard_normal((1, cin, side, side)).astype(np.float32)
        w = rng.standard_normal((cout, cin // groups, k, k)).astype(np.float32)
        params = ConvParams(weight=w, stride=stride, padding=k // 2, groups=groups)
        row = {"label": label}
        for backend in ("numba", "numpy"):
            os.environ["FACEKIT_BACKEND"] = backend
            row[backend] = _median_ms(lambda: conv2d(x, params), reps)
        rows.append(row)
    return rows


def bench_model(imgsz, reps):
    net = build_model(model_config("tiny"), seed=0).deploy()
    x = np.random.default_rng(1).uniform(0, 1, (1, 3, imgsz, imgsz)).astype(np.float32)
    row = {"label": f"tiny deploy fwd {imgsz}"}
    for backend in ("numba", "numpy"):
        os.environ["FACEKIT_BACKEND"] = backend
        row[backend] = _median_ms(lambda: net.forward(x), reps)
    return row


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--imgsz", type=int, default=160)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    if not NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return

    saved = os.environ.get("FACEKIT_BACKEND")
    try:
        rows = bench_layers(args.reps)
        rows.append(bench_model(args.imgsz, args.reps))
    finally:
        if saved is None:
            os.environ.pop("FACEKIT_BACKEND", None)
        else:
            os.environ["FACEKIT_BACKEND"] = saved

    print(f"{'shape':<24} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for row in rows:
        ratio = row["numpy"] / row["numba"]
        print(f"{row['label']:<24} {row['numba']:>10.3f} {row['numpy']:>10.3f} {ratio:>7.2f}x")


if __name__ == "__main__":
    main()
