import pytest

from instcache.config import ConfigError, RunConfig, apply_overrides, from_dict, load_config


def _write(tmp_path, text):
    p = tmp_path / "run.toml"
    p.write_text(text)
    return p


def test_defaults_without_file(monkeypatch):
    monkeypatch.delenv("INSTCACHE_CONFIG", raising=False)
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.prepop.sigmas == [4.0, 5.0, 6.0, 7.0, 8.0] and cfg.model.kind == "ngram"


def test_load_toml_sections(tmp_path):
    p = _write(tmp_path, """
seed = 7
[dataset]
synthetic_n = 1000
dedup = "global"
[prepop]
sigmas = [4, 5.5]
executor = "serial"
[serving]
timeout_ms = 500
""")
    cfg = load_config(p)
    assert cfg.seed == 7 and cfg.dataset.synthetic_n == 1000 and cfg.dataset.dedup == "global"
    assert cfg.prepop.sigmas == [4.0, 5.5] and cfg.prepop.executor == "serial"
    assert cfg.serving.timeout_ms == 500.0 and isinstance(cfg.serving.timeout_ms, float)


def test_env_var_fallback(tmp_path, monkeypatch):
    p = _write(tmp_path, "seed = 3\n")
    monkeypatch.setenv("INSTCACHE_CONFIG", str(p))
    assert load_config().seed == 3


@pytest.mark.parametrize("text, match", [
    ("bogus = 1\n", "unknown"),
    ("[prepop]\nsigmaa = 1\n", "prepop.sigmaa"),
    ("[extra]\nx = 1\n", "unknown"),
    ("[prepop]\nmax_len = \"16\"\n", "integer"),
    ("[prepop]\nmax_len = 1.5\n", "integer"),
    ("[dataset]\nfirst_turn_only = 1\n", "true/false"),
    ("[prepop]\nsigmas = [\"a\"]\n", "list"),
    ("[prepop]\nstrategy = \"random\"\n", "not one of"),
    ("prepop = 3\n", "table"),
    ("seed = \n", "run.toml"),
])
def test_rejects_bad_files(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        load_config(_write(tmp_path, text))


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.toml")


def test_overrides_win_and_none_is_skipped(tmp_path):
    cfg = load_config(_write(tmp_path, "seed = 3\n[prepop]\nmax_len = 8\n"))
    out = apply_overrides(cfg, {"seed": 9, "prepop.max_len": None, "prepop.sigma": 2})
    assert (out.seed, out.prepop.max_len, out.prepop.sigma) == (9, 8, 2.0)
    assert cfg.seed == 3  # input untouched
    with pytest.raises(ConfigError):
        apply_overrides(cfg, {"prepop.nope": 1})


def test_digest_and_provenance():
    a = RunConfig()
    b = from_dict({"out_dir": "elsewhere"})
    assert a.provenance() == b.provenance() and "out_dir" not in a.provenance()
    assert a.digest() != b.digest()
    assert a.digest() == RunConfig().digest()
    assert from_dict({"seed": 1}).provenance() != a.provenance()
