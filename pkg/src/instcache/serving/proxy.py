"""Cache-first completion proxy over the stdlib threading HTTP server.

POST /v1/complete  {"instruction": str}
    -> {"response": str, "cached": bool, "latency_ms": float, "output_tokens": int}
GET  /v1/metrics   -> ServingMetrics summary plus cache stats
GET  /v1/health    -> {"status": "ok"}

A hit is answered from the store and never touches the upstream. Upstream
timeouts map to 504, other upstream failures to 502, bad bodies to 400.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from ..cache import CacheStore
from .metrics import ServingMetrics
from .upstream import UpstreamConfig, UpstreamError, UpstreamTimeout, make_upstream

log = logging.getLogger(__name__)

MAX_BODY_BYTES = 1 << 20


class BadRequest(ValueError):
    pass


def parse_body(raw: bytes) -> str:
    try:
        body = json.loads(raw)
    except ValueError as exc:
        raise BadRequest("body is not JSON") from exc
    if not isinstance(body, dict) or not isinstance(body.get("instruction"), str):
        raise BadRequest('body must be {"instruction": <string>}')
    return body["instruction"]


class CacheFirstProxy:
    """Transport-independent request logic; the HTTP handler is a thin shell around it."""

    def __init__(self, store: CacheStore, upstream, metrics: ServingMetrics | None = None):
        self.store = store
        self.upstream = upstream
        self.metrics = metrics if metrics is not None else ServingMetrics()

    def complete(self, instruction: str) -> dict:
        t0 = time.perf_counter()
        entry = self.store.lookup_entry(instruction)
        if entry is not None:
            latency = (time.perf_counter() - t0) * 1000.0
            self.metrics.record(latency, entry.response_token_count, True)
            return {"response": entry.response, "cached": True, "latency_ms": latency,
                    "output_tokens": entry.response_token_count}
        try:
            result = self.upstream.complete(instruction)
        except UpstreamTimeout:
            self.metrics.record_error(timeout=True)
            raise
        except UpstreamError:
            self.metrics.record_error()
            raise
        latency = (time.perf_counter() - t0) * 1000.0
        self.metrics.record(latency, result.output_tokens, False)
        return {"response": result.response, "cached": False, "latency_ms": latency,
                "output_tokens": result.output_tokens}

    def handle(self, raw: bytes) -> tuple[int, dict]:
        try:
            instruction = parse_body(raw)
        except BadRequest as exc:
            self.metrics.record_error()
            return 400, {"error": "bad_request", "detail": str(exc)}
        try:
            return 200, self.complete(instruction)
        except UpstreamTimeout as exc:
            return 504, {"error": "upstream_timeout", "detail": str(exc)}
        except UpstreamError as exc:
            return 502, {"error": "upstream_error", "detail": str(exc)}

    def report(self) -> dict:
        out = self.metrics.summary()
        st = self.store.stats()
        out["cache_entries"] = st.entries
        out["cache_bytes"] = st.estimated_bytes
        out["upstream_calls"] = getattr(self.upstream, "calls", None)
        return out


class UpstreamApp:
    """Expose an upstream backend (usually simulated) with the same POST shape, for http-mode setups."""

    def __init__(self, upstream):
        self.upstream = upstream

    def handle(self, raw: bytes) -> tuple[int, dict]:
        try:
            instruction = parse_body(raw)
        except BadRequest as exc:
            return 400, {"error": "bad_request", "detail": str(exc)}
        try:
            c = self.upstream.complete(instruction)
        except UpstreamTimeout as exc:
            return 504, {"error": "upstream_timeout", "detail": str(exc)}
        return 200, {"response": c.response, "output_tokens": c.output_tokens}

    def report(self) -> dict:
        return {"upstream_calls": getattr(self.upstream, "calls", None)}


class _Handler(BaseHTTPRequestHandler):
    server_version = "instcache/0.1"

    def log_message(self, fmt, *args):
        log.debug("%s " + fmt, self.address_string(), *args)

    def _send(self, status: int, payload: dict) -> None:
        data = json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def do_GET(self):
        if self.path == "/v1/health":
            self._send(200, {"status": "ok"})
        elif self.path == "/v1/metrics":
            self._send(200, self.server.app.report())
        else:
            self._send(404, {"error": "not_found"})

    def do_POST(self):
        if self.path != "/v1/complete":
            self._send(404, {"error": "not_found"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
        except ValueError:
            length = -1
        if length < 0 or length > MAX_BODY_BYTES:
            self._send(400, {"error": "bad_request", "detail": "invalid Content-Length"})
            return
        status, payload = self.server.app.handle(self.rfile.read(length))
        self._send(status, payload)


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 256


class HttpService:
    """Run ``app`` (a CacheFirstProxy or UpstreamApp) on a background thread."""

    def __init__(self, app, host: str = "127.0.0.1", port: int = 0):
        self.app = app
        self.httpd = _Server((host, port), _Handler)
        self.httpd.app = app
        self._thread: threading.Thread | None = None

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "HttpService":
        if self._thread is not None:
            return self
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def close(self) -> None:
        if self._thread is not None:
            self.httpd.shutdown()
            self._thread.join()
        self.httpd.server_close()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.close()


def serve(store: CacheStore, upstream: UpstreamConfig | object, host: str = "127.0.0.1", port: int = 0,
          metrics: ServingMetrics | None = None) -> HttpService:
    """Start the proxy in the background and return the running service."""
    backend = make_upstream(upstream) if isinstance(upstream, UpstreamConfig) else upstream
    return HttpService(CacheFirstProxy(store, backend, metrics), host, port).start()
