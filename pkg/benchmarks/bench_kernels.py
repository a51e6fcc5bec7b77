"""Compare the compiled and numpy kernel backends on the hot loops.

    python benchmarks/bench_kernels.py [--repeats 5]

Prints one line per (kernel, size) with the time of each backend and the
speedup of the compiled one. Outputs of both backends are checked for
agreement before timing.
"""

import argparse
import time

import numpy as np

from gsmamba import kernels
from gsmamba.graphscan import window_size
from gsmamba.tensor import make_rng


def best_of(fn, repeats):
    fn()
    ts = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return min(ts)


def window_cases(rng, sides, radius, dim):
    for side in sides:
        L = side * side
        q, k = rng.normal(size=(L, 1, dim)), rng.normal(size=(L, 1, dim))
        v = rng.normal(size=(L, 1, dim))
        bias = rng.normal(size=window_size(radius))
        alpha = rng.uniform(size=(1, L, window_size(radius)))
        yield (f"window_scores {side}x{side} r={radius}",
               lambda m, q=q, k=k, b=bias, s=side: m.window_scores(q, k, b, s, s, radius, 0.25))
        yield (f"window_aggregate {side}x{side} r={radius}",
               lambda m, a=alpha, v=v, s=side: m.window_aggregate(a, v, s, s, radius))


def scan_cases(rng, lengths, dim, state):
    for L in lengths:
        u, delta = rng.normal(size=(L, dim)), rng.uniform(0.01, 0.5, (L, dim))
        A = -np.tile(np.arange(1.0, state + 1), (dim, 1))
        b, c = rng.normal(size=(L, state)), rng.normal(size=(L, state))
        abar = np.exp(delta[:, :, None] * A)
        bu = rng.normal(size=(L, dim, state))
        yield (f"scan_states L={L}", lambda m, a=abar, x=bu: m.scan_states(a, x))
        yield (f"scan_fused L={L}",
               lambda m, u=u, d=delta, b=b, c=c, A=A: m.scan_fused(u, d, A, b, c))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--radius", type=int, default=1)
    args = ap.parse_args()
    names = kernels.available()
    if "cython" not in names:
        print("compiled extension not built; only the numpy backend is available")
    mods = [kernels.get(n) for n in names]
    rng = make_rng(0)
    cases = list(window_cases(rng, (32, 64, 128), args.radius, 32))
    cases += list(scan_cases(rng, (1024, 4096, 16384), 32, 16))
    print(f"{'kernel':<32}" + "".join(f"{n:>12}" for n in names) + ("   speedup" if len(mods) > 1 else ""))
    for label, call in cases:
        outs = [call(m) for m in mods]
        for o in outs[1:]:
            np.testing.assert_allclose(o, outs[0], rtol=1e-10, atol=1e-12)
        ts = [best_of(lambda m=m: call(m), args.repeats) for m in mods]
        line = f"{label:<32}" + "".join(f"{t * 1e3:>10.2f}ms" for t in ts)
        if len(ts) > 1:
            line += f"{ts[names.index('python')] / ts[names.index('cython')]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
