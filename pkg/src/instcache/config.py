"""Run configuration: a TOML manifest with five sections, merged with flag overrides.

Grammar (every key optional; defaults shown)::

    seed = 0                      # drives every RNG in the pipeline
    out_dir = "out"

    [dataset]
    corpus = ""                   # NDJSON corpus; empty -> synthetic generator
    synthetic_n = 50000           # records drawn when corpus is empty
    synthetic_drift_at = -1.0     # fraction of the stream where slots shift; < 0 disables
    max_instr_tokens = 128        # keep instructions strictly shorter
    min_resp_tokens = 32          # keep responses at least this long
    first_turn_only = true
    pii_filter = false
    dedup = "none"                # none | global | per_ip
    split_mode = "random"         # random | time-ordered
    train_frac = 0.8
    valid_frac = 0.1
    test_frac = 0.1

    [model]
    kind = "ngram"                # ngram (trained on the train split) or a model string, e.g. "powerlaw:v=50,alpha=1.5"
    order = 3
    smoothing_alpha = 0.01
    vocab_cap = 8192

    [prepop]
    sigma = 6.0                   # single-run budget (prepopulate subcommand)
    sigmas = [4.0, 5.0, 6.0, 7.0, 8.0]   # ladder for the end-to-end run
    max_len = 16                  # L, counting the EOS token
    min_len = 1
    workers = 1
    split_depth = 1
    batch_size = 1
    strategy = "dfs"              # dfs | bfs
    executor = "thread"           # thread | process | serial

    [cache]
    trim = true
    nfc = false
    responder = "corpus-echo"     # template | corpus-echo | http
    responder_endpoint = ""

    [serving]
    host = "127.0.0.1"
    port = 8080
    upstream = "simulated"        # simulated | http
    endpoint = ""
    per_token_latency_ms = 10.0
    startup_latency_ms = 0.0
    response_tokens = 100
    timeout_ms = 30000.0
    rates = [1.0, 2.0, 4.0]       # loadgen request rates (per second)
    n_requests = 200
    concurrency = 64
    launch = false                # end-to-end run also starts serve + loadgen

Unknown sections or keys are rejected. Command-line flags win over the file.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

ENV_VAR = "INSTCACHE_CONFIG"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    corpus: str = ""
    synthetic_n: int = 50000
    synthetic_drift_at: float = -1.0
    max_instr_tokens: int = 128
    min_resp_tokens: int = 32
    first_turn_only: bool = True
    pii_filter: bool = False
    dedup: str = "none"
    split_mode: str = "random"
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1


@dataclass
class ModelSection:
    kind: str = "ngram"
    order: int = 3
    smoothing_alpha: float = 0.01
    vocab_cap: int = 8192


@dataclass
class PrepopSection:
    sigma: float = 6.0
    sigmas: list = field(default_factory=lambda: [4.0, 5.0, 6.0, 7.0, 8.0])
    max_len: int = 16
    min_len: int = 1
    workers: int = 1
    split_depth: int = 1
    batch_size: int = 1
    strategy: str = "dfs"
    executor: str = "thread"


@dataclass
class CacheSection:
    trim: bool = True
    nfc: bool = False
    responder: str = "corpus-echo"
    responder_endpoint: str = ""


@dataclass
class ServingSection:
    host: str = "127.0.0.1"
    port: int = 8080
    upstream: str = "simulated"
    endpoint: str = ""
    per_token_latency_ms: float = 10.0
    startup_latency_ms: float = 0.0
    response_tokens: int = 100
    timeout_ms: float = 30000.0
    rates: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    n_requests: int = 200
    concurrency: int = 64
    launch: bool = False


SECTIONS = {
    "dataset": DatasetSection,
    "model": ModelSection,
    "prepop": PrepopSection,
    "cache": CacheSection,
    "serving": ServingSection,
}

CHOICES = {
    ("dataset", "dedup"): ("none", "global", "per_ip"),
    ("dataset", "split_mode"): ("random", "time-ordered"),
    ("prepop", "strategy"): ("dfs", "bfs"),
    ("prepop", "executor"): ("thread", "process", "serial"),
    ("cache", "responder"): ("template", "corpus-echo", "http"),
    ("serving", "upstream"): ("simulated", "http"),
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "out"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    prepop: PrepopSection = field(default_factory=PrepopSection)
    cache: CacheSection = field(default_factory=CacheSection)
    serving: ServingSection = field(default_factory=ServingSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def provenance(self) -> dict:
        """Config fields that shape artifacts; ``out_dir`` is excluded so reruns elsewhere match."""
        d = self.to_dict()
        d.pop("out_dir")
        return d


def _coerce(section: str, key: str, default, value):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    allowed = CHOICES.get((section, key))
    if allowed and value not in allowed:
        raise ConfigError(f"{where}: {value!r} is not one of {allowed}")
    return value


def from_dict(data: dict, base: RunConfig | None = None) -> RunConfig:
    cfg = copy.deepcopy(base) if base is not None else RunConfig()
    for key, value in data.items():
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            sec = getattr(cfg, key)
            known = {f.name: f for f in fields(sec)}
            for k, v in value.items():
                if k not in known:
                    raise ConfigError(f"unknown key {key}.{k}")
                setattr(sec, k, _coerce(key, k, getattr(sec, k), v))
        elif key in ("seed", "out_dir"):
            setattr(cfg, key, _coerce("", key, getattr(cfg, key), value))
        else:
            raise ConfigError(f"unknown key or section {key!r}")
    return cfg


def load_config(path=None) -> RunConfig:
    """Read ``path`` (or $INSTCACHE_CONFIG); no file means all defaults."""
    path = path or os.environ.get(ENV_VAR)
    if not path:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data)


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Apply ``{"section.key": value}`` (or top-level ``key``) overrides; ``None`` values are skipped."""
    nested: dict = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        sec, _, key = dotted.rpartition(".")
        if sec:
            nested.setdefault(sec, {})[key] = value
        else:
            nested[key] = value
    return from_dict(nested, cfg)
