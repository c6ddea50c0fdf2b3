"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_core.py [--n 4000] [--repeat 5]
"""
import argparse
import timeit

import numpy as np
import scipy.sparse as sp

from qdc import _fallback

try:
    from qdc import _core
except ImportError:
    _core = None


def cases(n, rng):
    A = sp.random(n, n, density=8.0 / n, random_state=np.random.RandomState(0), format="csr")
    A = (A + A.T).tocsr()
    indptr = A.indptr.astype(np.int64)
    indices = A.indices.astype(np.int64)
    X = rng.normal(size=(n, 64))
    block = rng.normal(scale=1e-2, size=(1024, n))
    labels = rng.integers(0, 5, n).astype(np.int64)
    return {
        "csr_matmat": lambda m: m.csr_matmat(indptr, indices, A.data, X),
        "threshold_block": lambda m: m.threshold_block(block, 1e-2),
        "topk_block": lambda m: m.topk_block(block, 32),
        "homophily_counts": lambda m: m.homophily_counts(indptr, indices, labels),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=4000)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18} {'fallback ms':>12} {'compiled ms':>12} {'speedup':>8}")
    for name, fn in cases(args.n, rng).items():
        t_py = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat)) * 1e3
        if _core is None:
            print(f"{name:<18} {t_py:12.2f} {'n/a':>12} {'n/a':>8}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18} {t_py:12.2f} {t_c:12.2f} {t_py / t_c:8.1f}x")


if __name__ == "__main__":
    main()
