"""Benchmark: compiled log-sum-exp kernel vs the pure-NumPy fallback.

The kernel is the inner loop of every Sinkhorn message, so this measures
both the raw primitive and an end-to-end solve.  Run after building the
extension:

    python benchmarks/bench_lse.py
"""

import os
import subprocess
import sys
import time

import numpy as np


def bench_kernel(lse, sizes=(32, 128, 512), repeats=200):
    rng = np.random.default_rng(0)
    rows = []
    for n in sizes:
        K = np.ascontiguousarray(rng.normal(size=(n, n)))
        v = rng.normal(size=n)
        out = np.empty(n)
        lse(K, v, out)  # warm up
        t0 = time.perf_counter()
        for _ in range(repeats):
            lse(K, v, out)
        dt = (time.perf_counter() - t0) / repeats
        rows.append((n, dt))
    return rows


def bench_solve():
    from mmgw.mmspace import MarginalPenalty
    from mmgw.sinkhorn import ReferenceMeasure, SinkhornConfig, solve
    from mmgw.treecost import chain_tree

    rng = np.random.default_rng(1)
    sizes = [144, 144, 144]
    tree = chain_tree(sizes)
    costs = [rng.uniform(0.0, 1.0, size=(144, 144)) for _ in range(2)]
    mu = [np.full(144, 1.0 / 144) for _ in range(3)]
    ref = ReferenceMeasure.counting(sizes)
    cfg = SinkhornConfig(eps=5e-3, max_iter=300, tolerance=1e-30)
    t0 = time.perf_counter()
    solve(tree, costs, None, mu, [MarginalPenalty.balanced()] * 3, cfg, ref)
    return time.perf_counter() - t0


def main():
    import mmgw
    from mmgw._accel import lse_matvec as active
    from mmgw._accel.fallback import lse_matvec as fallback

    mode = "compiled" if mmgw.HAVE_COMPILED else "fallback"
    print(f"active kernel: {mode}")
    print(f"{'n':>6} {'active us':>12} {'fallback us':>12} {'speedup':>8}")
    act = bench_kernel(lambda K, v, out: active(K, v, out))
    fb = bench_kernel(fallback)
    for (n, ta), (_, tf) in zip(act, fb):
        print(f"{n:>6} {ta * 1e6:>12.1f} {tf * 1e6:>12.1f} {tf / ta:>8.2f}x")
    dt = bench_solve()
    print(f"\n300 balanced sweeps on a 144^3 chain ({mode}): {dt:.2f} s")
    if mmgw.HAVE_COMPILED and not os.environ.get("MGW_PURE_PYTHON"):
        env = dict(os.environ, MGW_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, __file__], env=env,
                             capture_output=True, text=True)
        tail = [l for l in out.stdout.splitlines() if "sweeps" in l]
        if tail:
            print(tail[0].replace("fallback", "pure-python fallback"))


if __name__ == "__main__":
    main()
