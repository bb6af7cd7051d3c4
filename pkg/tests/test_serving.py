import json
import threading
import time
import urllib.error
import urllib.request

import numpy as np
import pytest

from instcache.cache import CacheStore
from instcache.serving import (
    CacheFirstProxy,
    HttpService,
    HttpUpstream,
    LoadgenError,
    LoadProfile,
    ServingMetrics,
    SimulatedUpstream,
    UpstreamApp,
    UpstreamConfig,
    UpstreamTimeout,
    load_source,
    loadgen,
    metrics_report,
    poisson_arrivals,
    serve,
    simulate,
)


def _post(url, body, timeout=10):
    data = body if isinstance(body, bytes) else json.dumps(body).encode()
    req = urllib.request.Request(url + "/v1/complete", data=data, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            return resp.status, json.loads(resp.read())
    except urllib.error.HTTPError as exc:
        return exc.code, json.loads(exc.read())


def _store(pairs, tokens=10):
    s = CacheStore()
    for k, v in pairs:
        s.add(k, v, 1.0, tokens)
    return s


def test_upstream_config_validation():
    with pytest.raises(ValueError):
        UpstreamConfig(mode="grpc")
    with pytest.raises(ValueError):
        UpstreamConfig(mode="http")
    with pytest.raises(ValueError):
        UpstreamConfig(per_token_latency_ms=-1)
    with pytest.raises(ValueError):
        UpstreamConfig(timeout_ms=0)


def test_simulated_latency_arithmetic_virtual():
    up = SimulatedUpstream(10.0, 5.0, 100, sleep=False)
    c = up.complete("x", arrival=2.0)
    assert c.output_tokens == 100 and len(c.response.split()) == 100
    assert up.ledger == [(2.0, 2.0, pytest.approx(3.005))]


def test_simulated_latency_wall_clock():
    up = SimulatedUpstream(1.0, 20.0, 100)
    t0 = time.perf_counter()
    up.complete("x")
    elapsed = (time.perf_counter() - t0) * 1000
    assert 120 <= elapsed < 200


def test_simulated_upstream_is_fifo_and_deterministic():
    def run():
        up = SimulatedUpstream(1.0, 0.0, 100, sleep=False)
        for at in poisson_arrivals(20.0, n=50, seed=1):
            up.complete("q", arrival=float(at))
        return up.ledger

    ledger = run()
    assert ledger == run()
    for (a, s, f), (_, s2, _) in zip(ledger, ledger[1:]):
        assert s >= a and f == pytest.approx(s + 0.1) and s2 >= f - 1e-12


def test_simulated_timeout():
    up = SimulatedUpstream(10.0, 0.0, 100, timeout_ms=1500, sleep=False)
    up.complete("a", arrival=0.0)
    with pytest.raises(UpstreamTimeout):
        up.complete("b", arrival=0.0)  # would finish at 2.0 s


def test_hit_never_contacts_upstream_and_is_byte_identical():
    resp = "réponse with odd chars"
    up = SimulatedUpstream(0.0, 0.0, 5)
    proxy = CacheFirstProxy(_store([("What is AI?", resp)], tokens=7), up)
    out = proxy.complete("  what is ai?")
    assert out["cached"] and out["response"] == resp and out["output_tokens"] == 7
    assert up.calls == 0
    miss = proxy.complete("something else")
    assert not miss["cached"] and up.calls == 1 and miss["output_tokens"] == 5


def test_http_endpoints_and_bad_requests():
    up = SimulatedUpstream(0.0, 0.0, 3)
    with serve(_store([("hi", "cached hi")]), up) as svc:
        with urllib.request.urlopen(svc.url + "/v1/health") as r:
            assert r.status == 200
        assert _post(svc.url, {"instruction": "hi"}) == (200, {"response": "cached hi", "cached": True,
                                                               "latency_ms": pytest.approx(0, abs=5),
                                                               "output_tokens": 10})
        code, body = _post(svc.url, {"instruction": "new"})
        assert code == 200 and body["cached"] is False and body["response"] == "tok0 tok1 tok2"
        assert _post(svc.url, b"not json")[0] == 400
        assert _post(svc.url, {"instruction": 3})[0] == 400
        with urllib.request.urlopen(svc.url + "/v1/metrics") as r:
            m = json.loads(r.read())
        assert (m["requests"], m["hits"], m["misses"], m["errors"]) == (4, 1, 1, 2)
        assert m["upstream_calls"] == 1


def test_upstream_timeout_maps_to_504():
    slow = HttpService(UpstreamApp(SimulatedUpstream(10.0, 0.0, 50))).start()
    try:
        proxy = CacheFirstProxy(CacheStore(), HttpUpstream(slow.url + "/v1/complete", timeout_ms=100))
        with HttpService(proxy) as svc:
            code, body = _post(svc.url, {"instruction": "slow one"})
        assert code == 504 and body["error"] == "upstream_timeout"
        assert proxy.metrics.timeouts == 1 and proxy.metrics.errors == 1
    finally:
        slow.close()


def test_upstream_down_still_serves_cache():
    proxy = CacheFirstProxy(_store([("cached", "yes")]), HttpUpstream("http://127.0.0.1:1/v1/complete", 500))
    with HttpService(proxy) as svc:
        assert _post(svc.url, {"instruction": "cached"})[1]["response"] == "yes"
        code, body = _post(svc.url, {"instruction": "not cached"})
    assert code == 502 and body["error"] == "upstream_error"


def test_http_upstream_mode_roundtrip():
    with HttpService(UpstreamApp(SimulatedUpstream(0.0, 0.0, 4))) as up_svc:
        cfg = UpstreamConfig("http", up_svc.url + "/v1/complete")
        with serve(CacheStore(), cfg) as svc:
            code, body = _post(svc.url, {"instruction": "x"})
    assert code == 200 and body["output_tokens"] == 4 and not body["cached"]


def test_metrics_conservation_under_concurrency():
    up = SimulatedUpstream(0.0, 0.0, 2)
    proxy = CacheFirstProxy(_store([("hit", "r")]), up)

    def worker(k):
        for i in range(200):
            proxy.handle(json.dumps({"instruction": ["hit", "miss", 5][(i + k) % 3]}).encode())

    threads = [threading.Thread(target=worker, args=(k,)) for k in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    m = proxy.metrics
    assert m.requests == 1600 == m.hits + m.misses + m.errors
    assert up.calls == m.misses
    s = m.summary()
    assert np.isfinite(s["mean_tpot_ms"]) and s["hit_rate"] == pytest.approx(m.hits / (m.hits + m.misses))


def test_tpot_definition():
    m = ServingMetrics()
    m.record(100.0, 10, False)
    m.record(1.0, 0, True)  # zero tokens counts as one
    s = m.summary()
    assert s["mean_tpot_ms"] == pytest.approx(5.5)
    assert s["median_tpot_ms"] == pytest.approx(5.5)


def test_poisson_schedule():
    times = poisson_arrivals(10.0, duration=100.0, seed=0)
    assert 900 < len(times) < 1100
    gaps = np.diff(np.concatenate([[0.0], times]))
    assert abs(gaps.mean() - 0.1) / 0.1 < 0.05
    assert np.array_equal(times, poisson_arrivals(10.0, duration=100.0, seed=0))
    assert times[-1] < 100.0
    assert len(poisson_arrivals(2.0, n=7, seed=1)) == 7
    with pytest.raises(ValueError):
        poisson_arrivals(0.0, n=3)


def test_load_profile_validation():
    with pytest.raises(ValueError):
        LoadProfile(0.0, n_requests=1)
    with pytest.raises(ValueError):
        LoadProfile(1.0)


def test_loadgen_errors():
    with pytest.raises(LoadgenError):
        loadgen(LoadProfile(10.0, n_requests=3, source=[]), "http://127.0.0.1:1")
    with pytest.raises(LoadgenError):
        loadgen(LoadProfile(10.0, n_requests=3, source=["x"]), "http://127.0.0.1:1")


def test_loadgen_in_process_cycles_source():
    up = SimulatedUpstream(0.0, 0.0, 4)
    proxy = CacheFirstProxy(_store([("a", "r")]), up)
    m = loadgen(LoadProfile(500.0, n_requests=40, seed=2, source=["a", "b"]), proxy)
    assert (m.requests, m.hits, m.misses) == (40, 20, 20)
    assert up.calls == 20


def test_loadgen_over_http():
    with serve(_store([("a", "r")]), SimulatedUpstream(0.0, 0.0, 4)) as svc:
        m = loadgen(LoadProfile(200.0, n_requests=30, seed=2, source=["a", "b", "c"]), svc.url)
    assert (m.hits, m.misses, m.errors) == (10, 20, 0)


def test_limiting_cases_in_virtual_time():
    src = [f"q{i}" for i in range(10)]
    prof = LoadProfile(0.5, n_requests=200, seed=4, source=src)
    all_hits = simulate(prof, _store([(q, "r") for q in src]), SimulatedUpstream(10.0, 0.0, 10, sleep=False))
    assert all_hits.summary()["mean_tpot_ms"] == 0.0
    no_hits = simulate(prof, CacheStore(), SimulatedUpstream(10.0, 0.0, 10, sleep=False)).summary()
    assert no_hits["mean_tpot_ms"] == pytest.approx(10.0, rel=0.05)


def test_higher_rate_raises_miss_tpot_under_queueing():
    src = [f"q{i}" for i in range(10)]
    store = _store([(q, "r") for q in src[:5]])

    def miss_tpot(rate):
        m = simulate(LoadProfile(rate, n_requests=2000, seed=9, source=src), store,
                     SimulatedUpstream(10.0, 0.0, 10, timeout_ms=1e9, sleep=False))
        return np.mean([s.tpot_ms for s in m.samples if not s.cached])

    low, high = miss_tpot(2.0), miss_tpot(15.0)
    assert low >= 10.0 and high > low


def test_simulate_requires_virtual_upstream():
    with pytest.raises(ValueError):
        simulate(LoadProfile(1.0, n_requests=1, source=["x"]), CacheStore(), SimulatedUpstream())


def test_metrics_report_and_source_loading(tmp_path):
    rows = [{"rate_lambda": 1.0, "hit_rate": 0.5, "mean_tpot_ms": 5.0}]
    metrics_report(rows, tmp_path / "m.ndjson", tmp_path / "m.csv")
    assert json.loads((tmp_path / "m.ndjson").read_text()) == rows[0]
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "hit_rate,mean_tpot_ms,rate_lambda"
    with pytest.raises(ValueError):
        metrics_report([])
    src = tmp_path / "s.ndjson"
    src.write_text('{"format": "instcache-corpus"}\n{"instruction": "a"}\n')
    txt = tmp_path / "s.txt"
    txt.write_text("one\n\ntwo\n")
    assert load_source(txt) == ["one", "two"]
    assert load_source(src) == ["a"]
