import json
import os

import pytest

from instcache.cache import load_snapshot
from instcache.config import from_dict
from instcache.pipeline import StageError, end_to_end, sigma_tag


def _cfg(out, **extra):
    data = {
        "seed": 5,
        "out_dir": str(out),
        "dataset": {"synthetic_n": 3000},
        "prepop": {"sigmas": [4.0, 6.0, 8.0], "max_len": 10},
    }
    for sec, vals in extra.items():
        data.setdefault(sec, {}).update(vals)
    return from_dict(data)


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    return out, end_to_end(_cfg(out))


def test_sigma_tag():
    assert (sigma_tag(4.0), sigma_tag(4.5), sigma_tag(10.25)) == ("4", "4p5", "10p25")


def test_report_shape(run):
    out, res = run
    lines = [json.loads(x) for x in open(out / "report.ndjson")]
    header, rows = lines[0], lines[1:]
    assert header["format"] and header["config"]["seed"] == 5 and "out_dir" not in header["config"]
    assert set(header["splits"]) == {"train", "valid", "test"}
    assert [r["sigma"] for r in rows] == [4.0, 6.0, 8.0] == [r["sigma"] for r in res["rows"]]
    for r in rows:
        assert 0 <= r["predicted_hit_rate"] <= 1 and 0 <= r["actual_hit_rate"] <= 1
    assert (out / "report.csv").read_text().splitlines()[0].startswith("sigma,predicted_hit_rate,actual_hit_rate")
    for name in ("train", "valid", "test"):
        assert (out / "data" / f"{name}.ndjson").exists()


def test_ladder_is_monotone_with_containment(run):
    out, res = run
    rows = res["rows"]
    assert all(a["actual_hit_rate"] <= b["actual_hit_rate"] for a, b in zip(rows, rows[1:]))
    assert all(a["instructions"] <= b["instructions"] for a, b in zip(rows, rows[1:]))
    keys = [load_snapshot(out / "cache" / f"sigma_{sigma_tag(r['sigma'])}.ndjson").keys() for r in rows]
    assert all(a <= b for a, b in zip(keys, keys[1:]))


def test_rerun_is_byte_identical(run, tmp_path):
    _, res = run
    again = end_to_end(_cfg(tmp_path))
    assert again["digests"] == res["digests"]


def test_stage_failure_names_the_stage(tmp_path):
    cfg = _cfg(tmp_path, dataset={"corpus": str(tmp_path / "missing.ndjson")})
    with pytest.raises(StageError) as exc:
        end_to_end(cfg)
    assert exc.value.stage == "dataset"


def test_fixed_model_kind_and_serving_launch(tmp_path):
    cfg = _cfg(
        tmp_path,
        model={"kind": "powerlaw:v=30,alpha=1.5"},
        prepop={"sigmas": [5.0], "max_len": 4},
        serving={"launch": True, "per_token_latency_ms": 0.0, "response_tokens": 3, "rates": [200.0],
                 "n_requests": 20},
    )
    res = end_to_end(cfg)
    assert not os.path.exists(tmp_path / "model.ndjson")
    (row,) = res["serving"]
    assert row["rate_lambda"] == 200.0 and row["requests"] == 20
    assert (tmp_path / "serving.ndjson").exists()
