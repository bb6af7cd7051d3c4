"""Hot counting kernels with a numba path and a pure-numpy fallback.

``count_by_length(costs, budget, max_len)`` counts, for every length l in
0..max_len, the l-tuples over an alphabet with per-symbol cost ``costs``
(sorted ascending) whose summed cost is at most ``budget``. For a
context-free model with costs -ln p this is the exact number of token
sequences of each length whose NLL stays within the budget.

Set ``INSTCACHE_DISABLE_NUMBA=1`` to force the numpy path.
"""

from __future__ import annotations

import os

import numpy as np

NLL_TOL = 1e-9
_CHUNK_ELEMS = 1 << 21

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def numba_disabled() -> bool:
    return os.environ.get("INSTCACHE_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")


def _count_by_length_py(costs, budget, max_len, tol):
    counts = np.zeros(max_len + 1, dtype=np.int64)
    if budget + tol < 0.0:
        return counts
    counts[0] = 1
    if max_len == 0:
        return counts
    n = costs.shape[0]
    pos = np.zeros(max_len, dtype=np.int64)
    cums = np.zeros(max_len, dtype=np.float64)
    counts[1] += np.searchsorted(costs, budget - cums[0] + tol, side="right")
    m = 0
    while m >= 0:
        if m + 1 > max_len - 1:
            m -= 1
            continue
        i = pos[m]
        if i < n and cums[m] + costs[i] <= budget + tol:
            pos[m] = i + 1
            c = cums[m] + costs[i]
            m += 1
            cums[m] = c
            pos[m] = 0
            counts[m + 1] += np.searchsorted(costs, budget - c + tol, side="right")
        else:
            m -= 1
    return counts


if HAVE_NUMBA:
    _count_by_length_jit = nb.njit(cache=True, nogil=True)(_count_by_length_py)
else:  # pragma: no cover
    _count_by_length_jit = None


def count_by_length_numba(costs, budget: float, max_len: int, tol: float = NLL_TOL) -> np.ndarray:
    if _count_by_length_jit is None:
        raise RuntimeError("numba is not installed")
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    return _count_by_length_jit(costs, float(budget), int(max_len), float(tol))


def count_by_length_numpy(costs, budget: float, max_len: int, tol: float = NLL_TOL) -> np.ndarray:
    """Level-wise expansion, chunked so no intermediate exceeds ~2M floats."""
    costs = np.ascontiguousarray(costs, dtype=np.float64)
    counts = np.zeros(max_len + 1, dtype=np.int64)
    if budget + tol < 0.0:
        return counts
    counts[0] = 1
    if max_len == 0:
        return counts

    def visit(cums: np.ndarray, m: int) -> None:
        k = np.searchsorted(costs, budget - cums + tol, side="right")
        counts[m + 1] += int(k.sum())
        if m + 1 > max_len - 1:
            return
        step = max(1, _CHUNK_ELEMS // max(1, int(k.max(initial=0))))
        for lo in range(0, cums.shape[0], step):
            kc = k[lo : lo + step]
            total = int(kc.sum())
            if total == 0:
                continue
            offsets = np.arange(total) - np.repeat(np.cumsum(kc) - kc, kc)
            # same left-to-right accumulation order as the scalar path
            child = np.repeat(cums[lo : lo + step], kc) + costs[offsets]
            visit(child, m + 1)

    visit(np.zeros(1), 0)
    return counts


def count_by_length(costs, budget: float, max_len: int, tol: float = NLL_TOL) -> np.ndarray:
    if HAVE_NUMBA and not numba_disabled():
        return count_by_length_numba(costs, budget, max_len, tol)
    return count_by_length_numpy(costs, budget, max_len, tol)


def backend() -> str:
    return "numba" if HAVE_NUMBA and not numba_disabled() else "numpy"
