#!/usr/bin/env python3
"""Time the numba kernels against the numpy fallbacks.

Run after installing the package:

    python3 benchmarks/bench_kernels.py [--size 2048x512] [--repeats 30]

The first numba call per kernel is excluded (JIT warmup).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sttm import kernels


def _time(fn, repeats: int) -> float:
    fn()  # warmup: triggers JIT compilation on the numba path
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--size", default="2048x512", help="ROWSxCOLS for the benchmark matrices")
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()
    rows, cols = (int(v) for v in args.size.lower().split("x"))

    rng = np.random.default_rng(0)
    x = rng.standard_normal((rows, cols)).astype(np.float32)
    g = rng.standard_normal((rows, cols)).astype(np.float32)
    gamma = np.ones(cols, dtype=np.float32)
    beta = np.zeros(cols, dtype=np.float32)
    p = rng.standard_normal(rows * cols).astype(np.float32)
    m = np.zeros_like(p)
    v = np.zeros_like(p)

    cases = {
        "gelu_fwd": lambda: kernels.gelu_fwd(x),
        "gelu_bwd": lambda: kernels.gelu_bwd(x, g),
        "layernorm_fwd": lambda: kernels.layernorm_fwd(x, gamma, beta, 1e-5),
        "softmax_fwd": lambda: kernels.softmax_fwd(x),
        "adamw_update": lambda: kernels.adamw_update(
            p.copy(), g.ravel(), m.copy(), v.copy(), 1, 1e-3, 0.9, 0.999, 1e-8, 0.01
        ),
    }

    backends = kernels.available_backends()
    available = ["numpy"] + (["numba"] if "numba" in backends else [])
    results: dict[str, dict[str, float]] = {name: {} for name in cases}
    for backend in available:
        kernels.set_backend(backend)
        for name, fn in cases.items():
            results[name][backend] = _time(fn, args.repeats)

    width = max(len(n) for n in cases) + 2
    header = f"{'kernel':<{width}}" + "".join(f"{b:>12}" for b in available)
    if len(available) == 2:
        header += f"{'speedup':>10}"
    print(f"matrix {rows}x{cols}, best of {args.repeats}")
    print(header)
    for name, byb in results.items():
        line = f"{name:<{width}}" + "".join(f"{byb[b] * 1e3:>10.3f}ms" for b in available)
        if len(available) == 2:
            line += f"{byb['numpy'] / byb['numba']:>9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
