"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--nnz 196608] [--batch 16] [--length 2000000] [--peers 19]

Prints one row per kernel with the median time of each backend and the
speedup.  Both backends are also checked for identical output.
"""

import argparse
import statistics
import sys
import time

import numpy as np

from linleak import _kernels_py as fallback
from linleak.secure_agg import MERSENNE_61

try:
    from linleak import _kernels as compiled
except ImportError:
    compiled = None


def median_time(fn, repeats):
    fn()                                    # warm-up
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def workloads(nnz, batch, length, peers, seed=0):
    """(name, callable(backend) -> result) pairs sized like one client's FC1 / SA round."""
    rng = np.random.default_rng(seed)
    n_rows = max(1, nnz // 3072)
    n_cols = -(-nnz // n_rows)
    flat = np.sort(rng.choice(n_rows * n_cols, size=nnz, replace=False))
    rows, cols = (flat // n_cols).astype(np.int64), (flat % n_cols).astype(np.int64)
    vals = rng.normal(size=nnz)
    xt = np.ascontiguousarray(rng.random((n_cols, batch)))
    dt = np.ascontiguousarray(rng.normal(size=(n_rows, batch)))
    seeds = rng.integers(0, 2**63, size=peers, dtype=np.uint64)
    signs = np.where(np.arange(peers) % 2, 1, -1).astype(np.int8)
    base = rng.integers(0, MERSENNE_61, size=length, dtype=np.uint64)

    def mask(k):
        out = base.copy()
        k.prg_mask(out, seeds, signs, MERSENNE_61)
        return out

    return [
        (f"coo_matmul_t nnz={nnz} B={batch}", lambda k: k.coo_matmul_t(rows, cols, vals, xt, n_rows)),
        (f"coo_sddmm_t nnz={nnz} B={batch}", lambda k: k.coo_sddmm_t(rows, cols, dt, xt)),
        (f"prg_mask n={length} peers={peers}", mask),
    ]


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("--nnz", type=int, default=64 * 3072)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--length", type=int, default=2_000_000)
    p.add_argument("--peers", type=int, default=19)
    p.add_argument("--repeats", type=int, default=5)
    args = p.parse_args(argv)

    if compiled is None:
        print("compiled extension not built; only the numpy fallback is timed", file=sys.stderr)
    print(f"{'kernel':<42}{'numpy (s)':>12}{'cython (s)':>12}{'speedup':>10}")
    for name, fn in workloads(args.nnz, args.batch, args.length, args.peers):
        t_py = median_time(lambda: fn(fallback), args.repeats)
        if compiled is None:
            print(f"{name:<42}{t_py:>12.4f}{'-':>12}{'-':>10}")
            continue
        a, b = fn(fallback), fn(compiled)
        same = np.array_equal(a, b) if a.dtype == np.uint64 else np.allclose(a, b, rtol=1e-12, atol=1e-12)
        t_cy = median_time(lambda: fn(compiled), args.repeats)
        flag = "" if same else "  OUTPUT DIFFERS"
        print(f"{name:<42}{t_py:>12.4f}{t_cy:>12.4f}{t_py / t_cy:>9.1f}x{flag}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
