"""Open-loop Poisson load generator.

Arrival instants are fixed up front from a seeded Exponential(λ) gap sequence,
and requests cycle through the source in order, so a given seed always yields
the same schedule and request order. Requests are dispatched on a thread pool
at their scheduled instant regardless of whether earlier ones have finished.
"""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .metrics import ServingMetrics
from .upstream import UpstreamError, UpstreamTimeout, post_json

log = logging.getLogger(__name__)


class LoadgenError(RuntimeError):
    pass


@dataclass
class LoadProfile:
    rate_lambda: float
    duration_s: float | None = None
    n_requests: int | None = None
    seed: int = 0
    source: Sequence[str] = ()
    concurrency: int = 64
    timeout_s: float = 60.0

    def __post_init__(self):
        if not self.rate_lambda > 0:
            raise ValueError("rate_lambda must be > 0")
        if self.duration_s is None and self.n_requests is None:
            raise ValueError("give duration_s or n_requests")
        if self.n_requests is not None and self.n_requests < 1:
            raise ValueError("n_requests must be >= 1")
        if self.duration_s is not None and self.duration_s <= 0:
            raise ValueError("duration_s must be > 0")


def poisson_arrivals(rate: float, n: int | None = None, duration: float | None = None, seed: int = 0) -> np.ndarray:
    """Arrival times (seconds from start) with i.i.d. Exponential(rate) gaps.

    With ``n`` the first n arrivals are returned; otherwise all arrivals < duration.
    """
    if not rate > 0:
        raise ValueError("rate must be > 0")
    rng = np.random.default_rng(seed)
    if n is not None:
        return np.cumsum(rng.exponential(1.0 / rate, int(n)))
    if duration is None:
        raise ValueError("give n or duration")
    chunks, total = [], 0.0
    while total < duration:
        gaps = rng.exponential(1.0 / rate, max(16, int(rate * duration) + 1))
        times = total + np.cumsum(gaps)
        chunks.append(times)
        total = float(times[-1])
    times = np.concatenate(chunks)
    return times[times < duration]


def load_source(path) -> list[str]:
    """Instructions from an NDJSON test set ({"instruction": ...} per line) or a plain text file."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.lstrip().startswith("{"):
                row = json.loads(line)
                if "format" in row and "instruction" not in row:
                    continue  # artifact header
                out.append(str(row["instruction"]))
            else:
                out.append(line)
    return out


def _http_call(url: str, timeout: float):
    endpoint = url.rstrip("/") + "/v1/complete"

    def call(instruction: str) -> dict:
        return post_json(endpoint, {"instruction": instruction}, timeout)

    return call


def check_target(url: str, timeout: float = 5.0) -> None:
    import urllib.request

    try:
        with urllib.request.urlopen(url.rstrip("/") + "/v1/health", timeout=timeout) as resp:
            if resp.status != 200:
                raise LoadgenError(f"target {url} unhealthy: HTTP {resp.status}")
    except OSError as exc:
        raise LoadgenError(f"target {url} unreachable: {exc}") from exc


def loadgen(profile: LoadProfile, target) -> ServingMetrics:
    """Drive ``target`` (a base URL, or any object with ``complete(instruction) -> dict``).

    Latency is measured client-side around each call.
    """
    source = list(profile.source)
    if not source:
        raise LoadgenError("request source is empty")
    if isinstance(target, str):
        check_target(target)
        call = _http_call(target, profile.timeout_s)
    else:
        call = target.complete
    arrivals = poisson_arrivals(profile.rate_lambda, profile.n_requests, profile.duration_s, profile.seed)
    metrics = ServingMetrics()

    def one(instruction: str) -> None:
        t0 = time.perf_counter()
        try:
            reply = call(instruction)
        except UpstreamTimeout:
            metrics.record_error(timeout=True)
            return
        except (UpstreamError, OSError) as exc:
            log.debug("request failed: %s", exc)
            metrics.record_error()
            return
        latency = (time.perf_counter() - t0) * 1000.0
        metrics.record(latency, int(reply.get("output_tokens", 0)), bool(reply.get("cached")))

    with ThreadPoolExecutor(max_workers=profile.concurrency) as pool:
        start = time.perf_counter()
        metrics.started = start
        for i, at in enumerate(arrivals):
            delay = start + float(at) - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            pool.submit(one, source[i % len(source)])
    metrics.mark_finished()
    return metrics


def simulate(profile: LoadProfile, store, upstream) -> ServingMetrics:
    """Virtual-time run: no sleeping, fully deterministic given the seed.

    Hits cost zero time; misses go through ``upstream`` (a SimulatedUpstream
    with ``sleep=False``) at their arrival instant, so latency is the FIFO
    queueing delay plus service time.
    """
    source = list(profile.source)
    if not source:
        raise LoadgenError("request source is empty")
    if getattr(upstream, "sleep", True):
        raise ValueError("simulate needs a SimulatedUpstream with sleep=False")
    arrivals = poisson_arrivals(profile.rate_lambda, profile.n_requests, profile.duration_s, profile.seed)
    metrics = ServingMetrics()
    for i, at in enumerate(arrivals):
        instruction = source[i % len(source)]
        entry = store.get_entry(instruction)
        if entry is not None:
            metrics.record(0.0, entry.response_token_count, True)
            continue
        try:
            c = upstream.complete(instruction, arrival=float(at))
        except UpstreamTimeout:
            metrics.record_error(timeout=True)
            continue
        _, _, finish = upstream.ledger[-1]
        metrics.record((finish - float(at)) * 1000.0, c.output_tokens, False)
    metrics.started = 0.0
    metrics.finished = float(arrivals[-1]) if len(arrivals) else 0.0
    return metrics


def sweep(rates: Sequence[float], base: LoadProfile, target) -> list[dict]:
    """One loadgen run per rate; rows are ready for ``metrics_report``."""
    rows = []
    for rate in rates:
        prof = LoadProfile(rate, base.duration_s, base.n_requests, base.seed, base.source, base.concurrency, base.timeout_s)
        summary = loadgen(prof, target).summary()
        summary["rate_lambda"] = rate
        rows.append(summary)
    return rows
