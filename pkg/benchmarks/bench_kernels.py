"""Time the conv1d forward/backward kernels on every available backend.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes follow the toy and paper profiles' first two layers on a 300-frame
utterance. The paper-profile rows take a few seconds per backend.
"""

import argparse
import timeit

import numpy as np

from didfuse import kernels

CASES = [
    # (label, frames, in channels, out channels, kernel, stride)
    ("toy conv1", 300, 40, 32, 5, 1),
    ("toy conv2", 296, 32, 32, 7, 2),
    ("paper conv1", 300, 40, 500, 5, 1),
    ("paper conv2", 296, 500, 500, 7, 2),
]


def bench(mod, t, cin, cout, k, stride, repeat, rng):
    x = rng.normal(size=(t, cin))
    w = rng.normal(size=(cout, cin, k))
    b = rng.normal(size=cout)
    y, cols = mod.conv1d_forward(x, w, b, stride)
    dy = rng.normal(size=y.shape)
    fwd = min(timeit.repeat(lambda: mod.conv1d_forward(x, w, b, stride), number=1, repeat=repeat))
    bwd = min(timeit.repeat(lambda: mod.conv1d_backward(dy, cols, w, t, stride), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--toy-only", action="store_true")
    args = ap.parse_args()

    backends = kernels.available_backends()
    print(f"default backend: {kernels.BACKEND}; comparing {', '.join(sorted(backends))}")
    print(f"{'case':<12} {'backend':<8} {'forward ms':>11} {'backward ms':>12}")
    for label, t, cin, cout, k, stride in CASES:
        if args.toy_only and label.startswith("paper"):
            continue
        base = None
        for name in sorted(backends, key=lambda n: n != "python"):  # python is the baseline
            fwd, bwd = bench(backends[name], t, cin, cout, k, stride, args.repeat, np.random.default_rng(0))
            note = ""
            if base is None:
                base = (fwd, bwd)
            else:
                note = f"  speedup {base[0] / fwd:.2f}x / {base[1] / bwd:.2f}x"
            print(f"{label:<12} {name:<8} {1e3 * fwd:11.3f} {1e3 * bwd:12.3f}{note}")


if __name__ == "__main__":
    main()
