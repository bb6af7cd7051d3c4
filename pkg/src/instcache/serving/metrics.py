"""Request accounting and time-per-output-token (TPOT) aggregates."""

from __future__ import annotations

import csv
import json
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RequestSample:
    latency_ms: float
    output_tokens: int
    cached: bool

    @property
    def tpot_ms(self) -> float:
        return self.latency_ms / max(1, self.output_tokens)


class ServingMetrics:
    """Thread-safe counters plus a bounded ledger of completed requests.

    Invariant: requests == hits + misses + errors.
    """

    def __init__(self, max_samples: int = 1_000_000):
        self._lock = threading.Lock()
        self.samples: deque[RequestSample] = deque(maxlen=max_samples)
        self.requests = 0
        self.hits = 0
        self.misses = 0
        self.errors = 0
        self.timeouts = 0
        self.started = time.perf_counter()
        self.finished: float | None = None

    def record(self, latency_ms: float, output_tokens: int, cached: bool) -> None:
        with self._lock:
            self.requests += 1
            if cached:
                self.hits += 1
            else:
                self.misses += 1
            self.samples.append(RequestSample(float(latency_ms), int(output_tokens), bool(cached)))

    def record_error(self, timeout: bool = False) -> None:
        with self._lock:
            self.requests += 1
            self.errors += 1
            if timeout:
                self.timeouts += 1

    def mark_finished(self) -> None:
        self.finished = time.perf_counter()

    def summary(self) -> dict:
        with self._lock:
            samples = list(self.samples)
            requests, hits, misses, errors, timeouts = self.requests, self.hits, self.misses, self.errors, self.timeouts
        end = self.finished if self.finished is not None else time.perf_counter()
        elapsed = max(end - self.started, 1e-9)
        out = {
            "requests": requests,
            "hits": hits,
            "misses": misses,
            "errors": errors,
            "timeouts": timeouts,
            "hit_rate": hits / (hits + misses) if hits + misses else 0.0,
            "throughput_rps": len(samples) / elapsed,
            "tpot_definition": "latency_ms / max(1, output_tokens); cached responses use stored token counts",
        }
        if samples:
            tpot = np.array([s.tpot_ms for s in samples])
            lat = np.array([s.latency_ms for s in samples])
            out.update(
                {
                    "mean_tpot_ms": float(tpot.mean()),
                    "median_tpot_ms": float(np.median(tpot)),
                    "p95_tpot_ms": float(np.percentile(tpot, 95)),
                    "mean_latency_ms": float(lat.mean()),
                    "p95_latency_ms": float(np.percentile(lat, 95)),
                }
            )
        return out


def metrics_report(rows: list[dict], ndjson_path=None, csv_path=None) -> list[dict]:
    """Write per-run summary rows (one per request rate) as NDJSON and/or CSV."""
    if not rows:
        raise ValueError("no completed runs to report")
    if ndjson_path is not None:
        with open(ndjson_path, "w", encoding="utf-8") as fh:
            for r in rows:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    if csv_path is not None:
        keys = sorted({k for r in rows for k in r})
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            w.writerows(rows)
    return rows
