"""Compare the numba and pure-numpy backends of the length-bucketed count kernel.

    python3 benchmarks/bench_kernels.py [--vocab 1000] [--alpha 1.1] [--max-len 4]

The count kernel is what the exact cache-size oracle runs on context-free
models. Setting INSTCACHE_DISABLE_NUMBA=1 makes the library use the numpy path;
this script times both directly and checks they agree.
"""

import argparse
import json
import time

import numpy as np

from instcache.kernels import count_by_length_numba, count_by_length_numpy
from instcache.model import PowerLawModel


def best_of(fn, repeats):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--vocab", type=int, default=1000)
    ap.add_argument("--alpha", type=float, default=1.1)
    ap.add_argument("--max-len", type=int, default=4)
    ap.add_argument("--sigmas", default="8,10,12,14")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()

    costs = PowerLawModel(args.vocab, args.alpha).sorted_costs
    count_by_length_numba(costs, 1.0, 1)  # compile outside the timings

    for sigma in (float(s) for s in args.sigmas.split(",")):
        t_nb, c_nb = best_of(lambda: count_by_length_numba(costs, sigma, args.max_len), args.repeats)
        t_np, c_np = best_of(lambda: count_by_length_numpy(costs, sigma, args.max_len), args.repeats)
        row = {
            "sigma": sigma,
            "count": int(c_nb.sum()),
            "numba_s": t_nb,
            "numpy_s": t_np,
            "speedup": t_np / t_nb if t_nb > 0 else None,
            "agree": bool(np.array_equal(c_nb, c_np)),
        }
        print(json.dumps(row))


if __name__ == "__main__":
    main()
