"""Time the compiled kernels against the pure-Python fallback.

    python benchmarks/bench_kernels.py --pairs 20000 --dim 128

Both backends get identical inputs; the script also checks that their
outputs agree bit for bit before reporting throughput.
"""

import argparse
import time

import numpy as np

from distembed import kernels
from distembed.graph import PartitionMap, build_local_partition, from_edges


def _best(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def bench_local(mod, n_pairs, dim, repeat):
    rng = np.random.default_rng(0)
    rows = 4096
    U0 = rng.uniform(-0.5 / dim, 0.5 / dim, (rows, dim)).astype(np.float32)
    C0 = rng.uniform(-0.1, 0.1, (rows, dim)).astype(np.float32)
    us = rng.integers(0, rows, n_pairs)
    vs = rng.integers(0, rows, n_pairs)
    negs = rng.integers(0, rows, n_pairs)

    def run():
        U, C = U0.copy(), C0.copy()
        bufs = [np.empty(n_pairs, np.int64) for _ in range(4)]
        mod.sgd_local_pass(U, C, 0, rows, us, vs, negs, 1, 0.025, 1e-4, 1.0, *bufs)
        return U, C

    return _best(run, repeat), 2 * n_pairs


def bench_remote(mod, n_pairs, dim, repeat):
    rng = np.random.default_rng(1)
    rows, slots = 4096, 1024
    U0 = rng.uniform(-0.1, 0.1, (rows, dim)).astype(np.float32)
    Z = rng.uniform(-0.1, 0.1, (slots, dim)).astype(np.float32)
    ru = rng.integers(0, rows, n_pairs)
    rslot = rng.integers(0, slots, n_pairs)

    def run():
        U, delta = U0.copy(), np.zeros((slots, dim))
        mod.sgd_remote_pass(U, 0, ru, rslot, n_pairs // 2, Z, delta, 0.025, 1e-4, 1.0)
        return U, delta

    return _best(run, repeat), n_pairs


def bench_walk(mod, n_steps, repeat):
    n = 10_000
    rng = np.random.default_rng(2)
    edges = [(i, (i + 1) % n) for i in range(n)] + [tuple(e) for e in rng.integers(0, n, (3 * n, 2))]
    g = from_edges(n, edges)
    part = build_local_partition(g, PartitionMap((0, n)), 0)
    uni = rng.random(n_steps)

    def run():
        out = np.empty(n_steps + 1, np.int64)
        k = mod.walk_local(part.row_offsets, part.neighbors, part.row_cumweights, 0, n, 0, uni, out)
        return (out[:k],)

    return _best(run, repeat), n_steps


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=20_000)
    ap.add_argument("--dim", type=int, default=128)
    ap.add_argument("--steps", type=int, default=100_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled kernels not built; only the Python fallback is timed")
    cases = {
        "sgd_local_pass": lambda m: bench_local(m, args.pairs, args.dim, args.repeat),
        "sgd_remote_pass": lambda m: bench_remote(m, args.pairs, args.dim, args.repeat),
        "walk_local": lambda m: bench_walk(m, args.steps, args.repeat),
    }
    print(f"{'kernel':<18}{'backend':<9}{'seconds':>10}{'items/s':>14}{'speedup':>10}")
    for name, case in cases.items():
        results = {b: case(m) for b, m in sorted(backends.items())}
        base = results["python"][0][0]
        outs = [r[0][1] for r in results.values()]
        same = all(all(np.array_equal(a, b) for a, b in zip(outs[0], o)) for o in outs[1:])
        for b, ((secs, _), items) in results.items():
            print(f"{name:<18}{b:<9}{secs:>10.4f}{items / secs:>14,.0f}{base / secs:>9.1f}x")
        if not same:
            print(f"  WARNING: {name} outputs differ between backends")


if __name__ == "__main__":
    main()
