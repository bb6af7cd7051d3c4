"""Upstream completion backends: a real HTTP endpoint or a simulated FIFO server."""

from __future__ import annotations

import json
import socket
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from ..text import token_count


class UpstreamError(RuntimeError):
    pass


class UpstreamTimeout(UpstreamError):
    pass


def post_json(url: str, payload: dict, timeout: float) -> dict:
    data = json.dumps(payload).encode()
    req = urllib.request.Request(url, data=data, headers={"Content-Type": "application/json"}, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return json.loads(resp.read())
    except (socket.timeout, TimeoutError) as exc:
        raise UpstreamTimeout(f"upstream {url} timed out") from exc
    except urllib.error.URLError as exc:
        if isinstance(exc.reason, (socket.timeout, TimeoutError)):
            raise UpstreamTimeout(f"upstream {url} timed out") from exc
        raise UpstreamError(f"upstream {url} failed: {exc.reason}") from exc
    except (OSError, ValueError) as exc:
        raise UpstreamError(f"upstream {url} failed: {exc}") from exc


@dataclass
class UpstreamConfig:
    mode: str = "simulated"
    endpoint: str | None = None
    per_token_latency_ms: float = 10.0
    startup_latency_ms: float = 0.0
    response_tokens: int = 100
    timeout_ms: float = 30_000.0

    def __post_init__(self):
        if self.mode not in ("http", "simulated"):
            raise ValueError("upstream mode must be 'http' or 'simulated'")
        if self.mode == "http" and not self.endpoint:
            raise ValueError("http upstream needs an endpoint")
        if self.per_token_latency_ms < 0 or self.startup_latency_ms < 0:
            raise ValueError("latencies must be >= 0")
        if self.timeout_ms <= 0:
            raise ValueError("timeout must be > 0")
        if self.response_tokens < 1:
            raise ValueError("response_tokens must be >= 1")


@dataclass
class Completion:
    response: str
    output_tokens: int


@dataclass
class SimulatedUpstream:
    """Single FIFO worker: service time = startup + tokens * per_token.

    With ``sleep=True`` calls block in wall-clock time; with ``sleep=False``
    callers pass virtual arrival times and the ledger is fully deterministic.
    """

    per_token_latency_ms: float = 10.0
    startup_latency_ms: float = 0.0
    response_tokens: int = 100
    timeout_ms: float = 30_000.0
    sleep: bool = True
    calls: int = 0
    ledger: list = field(default_factory=list)

    def __post_init__(self):
        self._lock = threading.Lock()
        self._busy_until = 0.0

    def service_ms(self, tokens: int) -> float:
        return self.startup_latency_ms + tokens * self.per_token_latency_ms

    def text_for(self, instruction: str) -> str:
        words = [f"tok{i}" for i in range(self.response_tokens)]
        return " ".join(words)

    def complete(self, instruction: str, arrival: float | None = None) -> Completion:
        """``arrival`` (seconds, virtual clock) is only used when ``sleep`` is off."""
        tokens = self.response_tokens
        service = self.service_ms(tokens) / 1000.0
        with self._lock:
            self.calls += 1
            now = time.perf_counter() if self.sleep else float(arrival or 0.0)
            start = max(now, self._busy_until)
            finish = start + service
            if (finish - now) * 1000.0 > self.timeout_ms:
                self.ledger.append((now, None, None))
                raise UpstreamTimeout(f"simulated upstream queue exceeds {self.timeout_ms} ms")
            self._busy_until = finish
            self.ledger.append((now, start, finish))
        if self.sleep:
            delay = finish - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        return Completion(self.text_for(instruction), tokens)

    @classmethod
    def from_config(cls, cfg: UpstreamConfig, sleep: bool = True) -> "SimulatedUpstream":
        return cls(cfg.per_token_latency_ms, cfg.startup_latency_ms, cfg.response_tokens, cfg.timeout_ms, sleep)


class HttpUpstream:
    """Forward to ``endpoint`` using the proxy's own POST shape."""

    def __init__(self, endpoint: str, timeout_ms: float = 30_000.0):
        self.endpoint = endpoint
        self.timeout = timeout_ms / 1000.0
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, instruction: str, arrival: float | None = None) -> Completion:
        with self._lock:
            self.calls += 1
        reply = post_json(self.endpoint, {"instruction": instruction}, self.timeout)
        try:
            response = str(reply["response"])
        except (KeyError, TypeError) as exc:
            raise UpstreamError("upstream reply has no 'response' field") from exc
        tokens = reply.get("output_tokens")
        return Completion(response, int(tokens) if tokens is not None else token_count(response))


def make_upstream(cfg: UpstreamConfig):
    if cfg.mode == "http":
        return HttpUpstream(cfg.endpoint, cfg.timeout_ms)
    return SimulatedUpstream.from_config(cfg)
