"""Cache-first serving: proxy, upstream backends, load generation and TPOT metrics."""

from .loadgen import LoadgenError, LoadProfile, load_source, loadgen, poisson_arrivals, simulate, sweep
from .metrics import RequestSample, ServingMetrics, metrics_report
from .proxy import CacheFirstProxy, HttpService, UpstreamApp, serve
from .upstream import (
    Completion,
    HttpUpstream,
    SimulatedUpstream,
    UpstreamConfig,
    UpstreamError,
    UpstreamTimeout,
    make_upstream,
    post_json,
)

__all__ = [
    "CacheFirstProxy",
    "Completion",
    "HttpService",
    "HttpUpstream",
    "LoadProfile",
    "LoadgenError",
    "RequestSample",
    "ServingMetrics",
    "SimulatedUpstream",
    "UpstreamApp",
    "UpstreamConfig",
    "UpstreamError",
    "UpstreamTimeout",
    "load_source",
    "loadgen",
    "make_upstream",
    "metrics_report",
    "poisson_arrivals",
    "serve",
    "simulate",
    "sweep",
]
