"""Hit-rate and cache-size prediction.

* ``nll`` / ``empirical_cdf`` / ``predict_hit_rate``: the hit rate of a cache
  holding every instruction with NLL <= sigma is the validation-set NLL CDF
  evaluated at sigma.
* ``fit_power_law``: log-log least squares of mean probability per rank.
* ``estimate_count``: number of length-L texts within an NLL budget under a
  rank power law, both the full closed form and the beta ~ 1 simplification,
  computed in log space.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .kernels import count_by_length
from .model.base import TokenModel
from .model.synthetic import ContextFreeModel


def nll(model: TokenModel, tokens: Sequence[int]) -> float:
    """-sum ln p(t_i | BOS, t_1..t_{i-1}); +inf if any token has zero probability."""
    if len(tokens) == 0:
        raise ValueError("token sequence must be non-empty")
    state = model.root_state()
    total = 0.0
    owned = []
    try:
        for j, tok in enumerate(tokens):
            p = model.prob(state, tok)
            if p <= 0.0:
                return math.inf
            total = total - math.log(p)
            if j + 1 < len(tokens):
                if tok == model.spec.eos_id:
                    return math.inf
                state = model.extend(state, tok)
                owned.append(state)
    finally:
        for s in owned:
            model.release(s)
    return total


def text_nll(model: TokenModel, text: str, max_len: int | None = None) -> float:
    """NLL of an instruction string including its EOS; +inf when it cannot be tokenized."""
    toks = model.encode(text)
    if toks is None:
        return math.inf
    toks = list(toks) + [model.spec.eos_id]
    if max_len is not None and len(toks) > max_len:
        return math.inf
    return nll(model, toks)


@dataclass(frozen=True)
class NllDistribution:
    samples: np.ndarray

    @classmethod
    def from_values(cls, values: Iterable[float]) -> "NllDistribution":
        arr = np.sort(np.asarray(list(values), dtype=np.float64))
        if arr.size == 0:
            raise ValueError("NLL distribution needs at least one sample")
        if np.isnan(arr).any():
            raise ValueError("NLL samples must not be NaN")
        arr.setflags(write=False)
        return cls(arr)

    @property
    def count(self) -> int:
        return int(self.samples.size)

    def cdf(self, x):
        """(# samples <= x) / count; accepts scalars or arrays."""
        hits = np.searchsorted(self.samples, x, side="right")
        if np.ndim(hits) == 0:
            return float(hits) / self.count
        return hits / self.count

    def quantile(self, q: float) -> float:
        return float(np.quantile(self.samples[np.isfinite(self.samples)], q))


def empirical_cdf(model: TokenModel, instructions: Iterable[str], max_len: int | None = None) -> NllDistribution:
    return NllDistribution.from_values(text_nll(model, t, max_len) for t in instructions)


def predict_hit_rate(dist: NllDistribution, sigma: float) -> float:
    return dist.cdf(sigma)


# -- power law ---------------------------------------------------------------

@dataclass(frozen=True)
class PowerLawFit:
    alpha: float
    beta: float
    fit_r2: float
    source: str = ""
    ranks: int = 0


def mean_probability_by_rank(samples: Iterable[tuple[int, float]]) -> tuple[np.ndarray, np.ndarray]:
    arr = np.asarray(list(samples), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("need (rank, probability) samples")
    ranks = arr[:, 0].astype(np.int64)
    if (ranks < 1).any():
        raise ValueError("ranks start at 1")
    sums = np.bincount(ranks, weights=arr[:, 1])
    counts = np.bincount(ranks)
    present = np.nonzero(counts)[0]
    return present, sums[present] / counts[present]


def fit_power_law(samples: Iterable[tuple[int, float]], source: str = "") -> PowerLawFit:
    """Fit p = beta * rank^-alpha by least squares on ln p = ln beta - alpha ln rank."""
    ranks, means = mean_probability_by_rank(samples)
    keep = means > 0
    ranks, means = ranks[keep], means[keep]
    if ranks.size < 3:
        raise ValueError("need at least three distinct ranks with positive probability")
    x = np.log(ranks.astype(np.float64))
    y = np.log(means)
    A = np.column_stack([np.ones_like(x), x])
    (ln_beta, slope), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - (ln_beta + slope * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return PowerLawFit(float(-slope), float(math.exp(ln_beta)), r2, source, int(ranks.size))


def rank_samples_from_model(
    model: TokenModel, prefixes: Iterable[Sequence[int]], top_k: int | None = None
) -> list[tuple[int, float]]:
    """Collect (rank, probability) pairs from the distributions at each prefix."""
    out = []
    for prefix in prefixes:
        owned = []
        state = model.root_state()
        try:
            for tok in prefix:
                state = model.extend(state, tok)
                owned.append(state)
            dist = model.distribution(state, top_k)
            out.extend((r + 1, p) for r, p in enumerate(dist.probs))
        finally:
            for s in owned:
                model.release(s)
    return out


# -- count estimate --------------------------------------------------------------

@dataclass(frozen=True)
class CountEstimate:
    sigma: float
    alpha: float
    beta: float
    length: int
    log_n_simplified: float
    log_n_full: float

    @property
    def n_simplified(self) -> float:
        return _exp(self.log_n_simplified)

    @property
    def n_full(self) -> float:
        return _exp(self.log_n_full)


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def _log_pos(x: float) -> float:
    return math.log(x) if x > 0 else -math.inf


def estimate_count(alpha: float, beta: float, sigma: float, length: int) -> CountEstimate:
    """Number of length-``length`` texts with NLL <= sigma under p_i = beta i^-alpha.

    simplified: e^(s/a) (s/a)^(L-1) / (L-1)!
    full:       beta^(L/a) e^(s/a) / (L-1)! * (ln(beta)/a + s/a) * (L ln(beta)/a + s/a)^(L-2)
    with the L = 1 case of the full form being e^(s/a) beta^(1/a). A
    non-positive bracket means no text fits and gives log n = -inf.
    """
    if not alpha > 0:
        raise ValueError("alpha must be > 0")
    if not beta > 0:
        raise ValueError("beta must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if length < 1:
        raise ValueError("length must be >= 1")
    L = length
    r = sigma / alpha
    lb = math.log(beta) / alpha
    if L == 1:
        log_simple = r
        log_full = r + lb
    else:
        # 0^0 = 1 convention does not arise here since L - 1 >= 1
        log_simple = r + (L - 1) * _log_pos(r) - math.lgamma(L)
        log_full = L * lb + r - math.lgamma(L) + _log_pos(lb + r)
        if L > 2:
            log_full += (L - 2) * _log_pos(L * lb + r)
    return CountEstimate(sigma, alpha, beta, L, log_simple, log_full)


def exact_count(model: ContextFreeModel, sigma: float, length: int) -> int:
    """Exact number of token sequences of exactly ``length`` tokens with NLL <= sigma."""
    return int(count_by_length(model.sorted_costs, sigma, length)[length])


def exact_cache_size(model: ContextFreeModel, sigma: float, max_len: int, min_len: int = 1) -> int:
    """Instructions a pre-population of a context-free model yields, counted without enumeration."""
    costs = model.sorted_costs
    eos_cost = -math.log(model._dist.prob_of(model.spec.eos_id))
    content = np.sort(np.delete(costs, model._dist.ids.index(model.spec.eos_id)))
    per_len = count_by_length(content, sigma - eos_cost, max_len - 1)
    return int(per_len[min_len:].sum())


# -- reports --------------------------------------------------------------------

def predict_report(
    dist: NllDistribution,
    sigmas: Sequence[float],
    fit: PowerLawFit,
    max_len: int,
    min_len: int = 1,
) -> list[dict]:
    """Per-sigma predicted hit rate and cache size.

    Predicted counts sum the per-length estimate over every length a cached
    instruction can have (``min_len + 1`` .. ``max_len`` tokens with EOS).
    """
    rows = []
    for s in sigmas:
        full = simple = 0.0
        for L in range(max(1, min_len + 1), max_len + 1):
            est = estimate_count(fit.alpha, fit.beta, float(s), L)
            full += est.n_full
            simple += est.n_simplified
        rows.append(
            {
                "sigma": float(s),
                "predicted_hit_rate": predict_hit_rate(dist, s),
                "predicted_count_full": full,
                "predicted_count_simplified": simple,
            }
        )
    return rows


def write_ndjson(path, rows: Iterable[dict], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps(header, sort_keys=True) + "\n")
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def write_csv(path, rows: Sequence[dict]) -> None:
    import csv

    if not rows:
        open(path, "w").close()
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


__all__ = [
    "CountEstimate",
    "NllDistribution",
    "PowerLawFit",
    "empirical_cdf",
    "estimate_count",
    "exact_cache_size",
    "exact_count",
    "fit_power_law",
    "mean_probability_by_rank",
    "nll",
    "predict_hit_rate",
    "predict_report",
    "rank_samples_from_model",
    "text_nll",
    "write_csv",
    "write_ndjson",
]
