"""Time the conv kernels and one full training step on both backends.

    python benchmarks/bench_kernels.py [--repeat 50] [--batch 64]
"""
import argparse
import os
import subprocess
import sys
import time

import numpy as np

from smlhsi import _backend, kernels
from smlhsi.baselines import softmax_ce
from smlhsi.network import default_layers, init_weights
from smlhsi.sml import FeatureBatch, LossWeights, sml_forward_backward


def best_of(fn, repeat):
    fn()  # warm-up (and numba compile)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(batch, bands, rng):
    x = rng.standard_normal((batch, 5, 5, bands))
    w1 = rng.standard_normal((32, 3, 3, bands))
    h = rng.standard_normal((batch, 3, 3, 32))
    w2 = rng.standard_normal((64, 3, 3, 32))
    dy1 = rng.standard_normal((batch, 3, 3, 32))
    dy2 = rng.standard_normal((batch, 1, 1, 64))
    net = init_weights((5, 5, bands), default_layers(), 9, rng)
    labels = np.arange(batch) % 9

    def step():
        f, lg, cache = net.forward(x)
        _, dl = softmax_ce(lg, labels)
        out = sml_forward_backward(FeatureBatch(f, labels), LossWeights())
        net.backward(cache, 0.0002 * out.d_features, dl)

    return {
        "conv1 forward": lambda: kernels.conv2d_forward(x, w1, np.zeros(32)),
        "conv1 backward": lambda: kernels.conv2d_backward(x, w1, dy1),
        "conv2 forward": lambda: kernels.conv2d_forward(h, w2, np.zeros(64)),
        "conv2 backward": lambda: kernels.conv2d_backward(h, w2, dy2),
        "train step": step,
    }


def run_one(backend, label, args):
    """Time one case in a fresh interpreter so allocator and cache state from
    earlier cases cannot skew it."""
    cmd = [sys.executable, __file__, "--one", label, "--repeat", str(args.repeat),
           "--batch", str(args.batch), "--bands", str(args.bands)]
    env = dict(os.environ, SML_BACKEND=backend)
    out = subprocess.run(cmd, env=env, check=True, capture_output=True, text=True).stdout
    return float(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--bands", type=int, default=103)
    ap.add_argument("--one", help=argparse.SUPPRESS)
    args = ap.parse_args()

    labels = list(cases(1, 1, np.random.default_rng(0)))
    if args.one:
        fn = cases(args.batch, args.bands, np.random.default_rng(0))[args.one]
        print(best_of(fn, args.repeat))
        return

    backends = ["numpy"] + (["numba"] if _backend.HAVE_NUMBA else [])
    print(f"batch {args.batch}, bands {args.bands}, best of {args.repeat}")
    print(f"{'case':16s}" + "".join(f"{b:>12s}" for b in backends)
          + ("     speedup" if len(backends) > 1 else ""))
    for label in labels:
        row = [run_one(b, label, args) for b in backends]
        line = f"{label:16s}" + "".join(f"{t * 1e6:10.0f}us" for t in row)
        if len(row) > 1:
            line += f"{row[0] / row[1]:11.2f}x"
        print(line)


if __name__ == "__main__":
    main()
