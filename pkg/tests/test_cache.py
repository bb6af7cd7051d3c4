import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instcache.cache import (
    CacheStore,
    CorpusEchoResponder,
    HttpResponder,
    SnapshotError,
    build_store,
    bulk_load,
    load_snapshot,
    normalize,
    template_responder,
)
from instcache.model import PowerLawModel
from instcache.prepopulate import Instruction, PrepopConfig, prepopulate, write_prepop
from instcache.serving import HttpService, SimulatedUpstream, UpstreamApp


def test_normalize():
    assert normalize("  What IS AI?  ") == "what is ai?"
    assert normalize(" A ", trim=False) == " a "
    assert normalize("Café", nfc=True) == "café"


def test_lookup_is_exact_on_normalized_key():
    s = CacheStore()
    s.add("What is AI?", "resp", 1.0)
    assert s.lookup("  what is ai?") == "resp"
    assert s.lookup("what is ai") is None
    st_ = s.stats()
    assert (st_.lookups, st_.hits, st_.misses) == (2, 1, 1)
    assert st_.hit_rate == 0.5


def test_lowest_nll_wins_on_key_collision():
    s = CacheStore()
    assert s.add("Hello", "first", 2.0)
    assert not s.add("hello", "worse", 3.0)
    assert s.add("HELLO", "better", 1.0)
    e = s.get_entry("hello")
    assert e.response == "better" and e.nll == 1.0 and len(s) == 1
    assert s.stats().estimated_bytes == e.estimated_bytes


def test_estimated_bytes_accounting():
    s = CacheStore()
    s.add("ab", "xyz", 0.5)
    assert s.stats().estimated_bytes == 2 + 2 + 3 + 64


def test_snapshot_roundtrip_is_byte_identical(tmp_path):
    s = CacheStore(sigma=3.0)
    for i, text in enumerate(["b thing", "A thing", "ünïcode"]):
        s.add(text, f"response {i}", float(i), 2)
    p1, p2 = tmp_path / "a.ndjson", tmp_path / "b.ndjson"
    s.persist(p1, {"config": {"seed": 1}})
    again = load_snapshot(p1)
    again.persist(p2, {"config": {"seed": 1}})
    assert p1.read_bytes() == p2.read_bytes()
    assert again.sigma == 3.0
    assert [e.normalized_key for e in again.entries()] == sorted(s.keys())


@settings(max_examples=30, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), st.tuples(st.text(max_size=20), st.floats(0, 30)), max_size=15))
def test_snapshot_roundtrip_property(tmp_path_factory, items):
    s = CacheStore(sigma=1.5)
    for k, (resp, nll) in items.items():
        s.add(k, resp, nll)
    p = tmp_path_factory.mktemp("snap") / "s.ndjson"
    s.persist(p)
    assert load_snapshot(p).serialize() == s.serialize()


def test_snapshot_errors(tmp_path):
    p = tmp_path / "s.ndjson"
    p.write_text('{"format": "instcache-store", "version": 2}\n')
    with pytest.raises(SnapshotError, match="version"):
        load_snapshot(p)
    p.write_text('{"format": "instcache-store", "version": 1, "count": 1}\n{"key": 1}\n')
    with pytest.raises(SnapshotError, match=":2:"):
        load_snapshot(p)
    p.write_text("")
    with pytest.raises(SnapshotError):
        load_snapshot(p)
    p.write_bytes(b"\xff\xfe\x00")
    with pytest.raises(SnapshotError):
        load_snapshot(p)


def test_concurrent_lookups_count_exactly():
    s = CacheStore()
    s.add("hit", "r", 0.0)

    def worker():
        for i in range(500):
            s.lookup("hit" if i % 2 else "miss")

    threads = [threading.Thread(target=worker) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    st_ = s.stats()
    assert st_.lookups == 4000 and st_.hits == 2000


def test_responders():
    assert template_responder("hi") == "echo:hi"
    echo = CorpusEchoResponder([("What is AI", "AI is..."), ("what is ai", "second")])
    assert echo("what is ai") == "AI is..."
    assert echo("unknown") == "echo:unknown"


def test_http_responder_against_simulated_upstream():
    with HttpService(UpstreamApp(SimulatedUpstream(0.0, 0.0, 3))) as svc:
        assert HttpResponder(svc.url + "/v1/complete")("anything") == "tok0 tok1 tok2"


def test_build_store_skips_failing_responder():
    def flaky(text):
        if text == "bad":
            raise RuntimeError("boom")
        return "ok"

    store = build_store([Instruction(1.0, "good", (1,)), Instruction(2.0, "bad", (2,))], flaky)
    assert store.keys() == {"good"}


def test_bulk_load_from_prepop_file(tmp_path):
    res = prepopulate(PowerLawModel(10, 1.2, max_len=4), PrepopConfig(8.0, 4))
    p = tmp_path / "p.ndjson"
    write_prepop(p, res, "d")
    store, stats = bulk_load(p)
    assert stats.entries == len(res.instructions) == len(store)
    assert store.sigma == 8.0
    first = res.instructions[0]
    assert store.get_entry(first.text).response == "echo:" + first.text
    assert store.get_entry(first.text).nll == first.nll
