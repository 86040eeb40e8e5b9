"""Compare the numba and pure-numpy kernel backends.

Times each hot kernel at training-sized shapes, then one full training step
per backend in a fresh interpreter (the backend is picked at import time
from DILSEARCH_BACKEND).

    python3 benchmarks/bench_backends.py [--repeats 20] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from dilsearch.kernels import get_impl
from dilsearch.tensor import conv_output_size

# (label, input shape, kernel, stride, dilation, padding)
CONV_CASES = [
    ("stem 7x7/2", (8, 3, 96, 96), 7, 2, 1, 3),
    ("stage1 3x3", (8, 64, 24, 24), 3, 1, 1, 1),
    ("stage4 3x3 d4", (8, 64, 12, 12), 3, 1, 4, 4),
]
POOL_CASE = (8, 64, 48, 48)

STEP_SNIPPET = """
import time, numpy as np
from dilsearch.convert import convert_to_dilated
from dilsearch.network import build_network, init_params, forward_segmentation, RunMode
from dilsearch.tensor import Tape, Tensor, backward, softmax_cross_entropy
from dilsearch import kernels
spec = convert_to_dilated(build_network("light_v1", 2))
params = init_params(spec, 0)
rng = np.random.default_rng(0)
x = Tensor(rng.uniform(0, 1, (8, 3, 96, 96)).astype(np.float32))
y = rng.integers(0, 2, (8, 96, 96))
times = []
for i in range({n}):
    t0 = time.perf_counter()
    with Tape():
        loss = softmax_cross_entropy(forward_segmentation(spec, params, x, RunMode(training=True)), y)
    backward(loss)
    params.zero_grad()
    times.append(time.perf_counter() - t0)
print(kernels.BACKEND, float(loss.data), float(np.median(times[2:]) * 1e3))
"""


def timeit(fn, repeats):
    fn()  # compile / warm caches
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return float(np.median(ts) * 1e3)


def kernel_rows(repeats):
    rng = np.random.default_rng(0)
    rows = []
    for label, shape, k, s, d, p in CONV_CASES:
        x = rng.standard_normal(shape).astype(np.float32)
        n, c, h, w = shape
        oh, ow = conv_output_size(h, k, s, d, p), conv_output_size(w, k, s, d, p)
        args = (k, k, s, s, d, d, p, p, oh, ow)
        cols = rng.standard_normal((c * k * k, n * oh * ow)).astype(np.float32)
        for name in ("numba", "numpy"):
            impl = get_impl(name)
            rows.append((f"im2col {label}", name, timeit(lambda: impl.im2col(x, *args), repeats)))
            rows.append((f"col2im {label}", name, timeit(lambda: impl.col2im(cols, n, c, h, w, *args), repeats)))
    x = rng.standard_normal(POOL_CASE).astype(np.float32)
    oh, ow = conv_output_size(POOL_CASE[2], 3, 2, 1, 1), conv_output_size(POOL_CASE[3], 3, 2, 1, 1)
    for name in ("numba", "numpy"):
        impl = get_impl(name)
        out, idx = impl.maxpool_forward(x, 3, 2, 1, oh, ow)
        g = np.ones_like(out)
        rows.append(("maxpool fwd", name, timeit(lambda: impl.maxpool_forward(x, 3, 2, 1, oh, ow), repeats)))
        rows.append(("maxpool bwd", name, timeit(lambda: impl.maxpool_backward(g, idx, *POOL_CASE[2:]), repeats)))
    return rows


def step_rows(steps):
    rows = []
    for name in ("numba", "numpy"):
        env = dict(os.environ, DILSEARCH_BACKEND=name)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(n=steps)], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        rows.append(("train step light_v1 8x96x96", out[0], float(out[2])))
        rows.append(("  final loss", out[0], float(out[1])))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--steps", type=int, default=7)
    ap.add_argument("--json")
    args = ap.parse_args(argv)

    rows = kernel_rows(args.repeats) + step_rows(args.steps)
    by_case = {}
    for case, backend, ms in rows:
        by_case.setdefault(case, {})[backend] = ms
    width = max(len(c) for c in by_case)
    print(f"{'case'.ljust(width)} | {'numba':>10} | {'numpy':>10} | speedup")
    for case, d in by_case.items():
        if case.strip().startswith("final loss"):
            print(f"{case.ljust(width)} | {d['numba']:>10.6f} | {d['numpy']:>10.6f} |")
            continue
        print(f"{case.ljust(width)} | {d['numba']:>8.2f}ms | {d['numpy']:>8.2f}ms | {d['numpy'] / d['numba']:.2f}x")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(by_case, fh, indent=2)


if __name__ == "__main__":
    main()
