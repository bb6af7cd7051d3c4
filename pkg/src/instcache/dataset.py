"""Corpus ingestion and preparation: first turns, length filters, dedup, splits, evaluation."""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from typing import Callable, Iterable, Sequence

from .cache import CacheStore, normalize
from .text import token_count

log = logging.getLogger(__name__)

MAX_MALFORMED_FRACTION = 0.10


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusRecord:
    conversation_id: str
    turn_index: int
    instruction: str
    response: str
    instruction_token_len: int
    response_token_len: int
    ip_hash: str | None = None
    timestamp: datetime | None = None

    def to_json(self) -> dict:
        row = {
            "conversation_id": self.conversation_id,
            "turn": self.turn_index,
            "instruction": self.instruction,
            "response": self.response,
        }
        if self.ip_hash is not None:
            row["ip_hash"] = self.ip_hash
        if self.timestamp is not None:
            row["timestamp"] = self.timestamp.isoformat()
        return row


def make_record(conversation_id, turn_index, instruction, response, ip_hash=None, timestamp=None,
                tokenizer: Callable[[str], int] = token_count) -> CorpusRecord:
    if turn_index < 0:
        raise ValueError("turn_index must be >= 0")
    return CorpusRecord(
        str(conversation_id),
        int(turn_index),
        instruction,
        response,
        tokenizer(instruction),
        tokenizer(response),
        ip_hash,
        timestamp,
    )


def parse_timestamp(value) -> datetime | None:
    if value is None:
        return None
    if isinstance(value, (int, float)):
        return datetime.fromtimestamp(value, tz=timezone.utc)
    text = str(value)
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    return ts if ts.tzinfo else ts.replace(tzinfo=timezone.utc)


@dataclass
class IngestReport:
    lines: int = 0
    records: int = 0
    malformed: int = 0


def _records_from_obj(obj: dict, tokenizer) -> list[CorpusRecord]:
    conv = obj.get("conversation_id", obj.get("id"))
    if conv is None:
        raise KeyError("conversation_id")
    ip = obj.get("ip_hash")
    ts = parse_timestamp(obj.get("timestamp"))
    if "turns" in obj:
        out = []
        for i, turn in enumerate(obj["turns"]):
            out.append(make_record(conv, i, str(turn["instruction"]), str(turn["response"]), ip, ts, tokenizer))
        return out
    if "messages" in obj:
        msgs = obj["messages"]
        out = []
        users = [m for m in msgs if m["role"] == "user"]
        for i, user in enumerate(users):
            j = msgs.index(user)
            reply = next((m["content"] for m in msgs[j + 1 :] if m["role"] == "assistant"), "")
            out.append(make_record(conv, i, str(user["content"]), str(reply), ip, ts, tokenizer))
        return out
    instruction = obj["instruction"]
    if not isinstance(instruction, str):
        raise TypeError("instruction must be a string")
    return [make_record(conv, int(obj.get("turn", 0)), instruction, str(obj.get("response", "")), ip, ts, tokenizer)]


def ingest(path, tokenizer: Callable[[str], int] = token_count, report: IngestReport | None = None) -> list[CorpusRecord]:
    """Read corpus NDJSON: flat turn records, or conversations with "turns"/"messages" lists.

    Malformed lines are skipped and counted; more than 10% malformed is an error.
    """
    report = report if report is not None else IngestReport()
    records: list[CorpusRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            report.lines += 1
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise TypeError("not an object")
                if report.lines == 1 and "format" in obj:
                    report.lines = 0  # artifact header, not a record
                    continue
                records.extend(_records_from_obj(obj, tokenizer))
            except (ValueError, KeyError, TypeError) as exc:
                report.malformed += 1
                log.debug("%s:%d skipped: %s", path, lineno, exc)
    report.records = len(records)
    if report.lines and report.malformed / report.lines > MAX_MALFORMED_FRACTION:
        raise IngestError(f"{path}: {report.malformed}/{report.lines} malformed lines exceed 10%")
    if report.malformed:
        log.warning("%s: skipped %d malformed lines", path, report.malformed)
    return records


def write_corpus(path, records: Iterable[CorpusRecord], header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({**header, "format": "instcache-corpus", "version": 1}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def filter_pipeline(
    records: Iterable[CorpusRecord],
    max_instr_tokens: int = 128,
    min_resp_tokens: int = 32,
    first_turn_only: bool = True,
    scrubber: Callable[[CorpusRecord], bool] | None = None,
) -> list[CorpusRecord]:
    """Keep first turns with instruction length < max and response length >= min."""
    out = []
    for r in records:
        if first_turn_only and r.turn_index != 0:
            continue
        if r.instruction_token_len >= max_instr_tokens:
            continue
        if r.response_token_len < min_resp_tokens:
            continue
        if scrubber is not None and scrubber(r):
            continue
        out.append(r)
    return out


DEFAULT_PII_PATTERNS = (
    r"[\w.+-]+@[\w-]+\.[\w.]+",
    r"\+?\d[\d\s().-]{7,}\d",
    r"\b\d{3}-\d{2}-\d{4}\b",
)


def pii_scrubber(patterns: Sequence[str] = DEFAULT_PII_PATTERNS, denylist: Sequence[str] = ()) -> Callable[[CorpusRecord], bool]:
    """Best-effort predicate flagging records that look like they carry personal data."""
    rx = re.compile("|".join(f"(?:{p})" for p in patterns)) if patterns else None
    deny = [d.lower() for d in denylist]

    def flagged(record: CorpusRecord) -> bool:
        text = record.instruction
        if rx is not None and rx.search(text):
            return True
        low = text.lower()
        return any(d in low for d in deny)

    return flagged


def dedup(records: Iterable[CorpusRecord], mode: str = "global") -> list[CorpusRecord]:
    """Keep the first occurrence per normalised instruction (per ip_hash in ``per_ip`` mode)."""
    if mode not in ("global", "per_ip"):
        raise ValueError("mode must be 'global' or 'per_ip'")
    seen = set()
    out = []
    for r in records:
        if mode == "per_ip":
            if r.ip_hash is None:
                raise ValueError(f"per_ip dedup needs ip_hash (conversation {r.conversation_id})")
            key = (r.ip_hash, normalize(r.instruction))
        else:
            key = normalize(r.instruction)
        if key in seen:
            continue
        seen.add(key)
        out.append(r)
    return out


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.8
    valid_frac: float = 0.1
    test_frac: float = 0.1
    seed: int = 0
    mode: str = "random"

    def __post_init__(self):
        fracs = (self.train_frac, self.valid_frac, self.test_frac)
        if any(not (0.0 < f < 1.0) for f in fracs):
            raise ValueError("split fractions must lie in (0, 1)")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError("split fractions must sum to 1")
        if self.mode not in ("random", "time-ordered"):
            raise ValueError("mode must be 'random' or 'time-ordered'")


def split(records: Sequence[CorpusRecord], spec: SplitSpec = SplitSpec()):
    """Seeded shuffle (or timestamp sort) then contiguous train/valid/test slices."""
    items = list(records)
    if spec.mode == "time-ordered":
        if any(r.timestamp is None for r in items):
            raise ValueError("time-ordered split needs timestamps on every record")
        items.sort(key=lambda r: r.timestamp)
    else:
        random.Random(spec.seed).shuffle(items)
    n = len(items)
    n_train = round(n * spec.train_frac)
    n_valid = round(n * spec.valid_frac)
    return items[:n_train], items[n_train : n_train + n_valid], items[n_train + n_valid :]


def subsample(records: Sequence[CorpusRecord], fraction: float, seed: int = 0) -> list[CorpusRecord]:
    """Seeded subset, e.g. to evaluate on 1% .. 7.5% of a corpus instead of the full test split."""
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    k = max(1, round(len(records) * fraction))
    idx = sorted(random.Random(seed).sample(range(len(records)), k))
    return [records[i] for i in idx]


@dataclass
class HitReport:
    rate: float
    total: int
    hits: list[str]


def _hit_predicate(store) -> Callable[[str], bool]:
    if isinstance(store, CacheStore):
        return lambda text: store.get_entry(text) is not None
    if callable(store):
        return store
    raise TypeError("store must be a CacheStore or a predicate")


def evaluate_hit_rate(store, test_records: Sequence[CorpusRecord]) -> HitReport:
    if not test_records:
        raise ValueError("test set is empty")
    hit = _hit_predicate(store)
    hits = [r.instruction for r in test_records if hit(r.instruction)]
    return HitReport(len(hits) / len(test_records), len(test_records), hits)


def repetition_baseline(train: Sequence[CorpusRecord], test: Sequence[CorpusRecord]) -> float:
    """Fraction of test instructions whose normalised text occurs in train."""
    if not train or not test:
        raise ValueError("train and test must be non-empty")
    seen = {normalize(r.instruction) for r in train}
    return sum(normalize(r.instruction) in seen for r in test) / len(test)


def timeslice_eval(store, records: Sequence[CorpusRecord], window) -> list[dict]:
    """Hit rate per consecutive time window.

    ``window`` is either a ``timedelta`` (calendar windows from the first
    timestamp) or an int number of equal-count windows.
    """
    if any(r.timestamp is None for r in records):
        raise ValueError("time-sliced evaluation needs timestamps")
    if not records:
        raise ValueError("no records to evaluate")
    hit = _hit_predicate(store)
    ordered = sorted(records, key=lambda r: r.timestamp)
    groups: list[list[CorpusRecord]] = []
    if isinstance(window, timedelta):
        t0 = ordered[0].timestamp
        for r in ordered:
            idx = int((r.timestamp - t0) / window)
            while len(groups) <= idx:
                groups.append([])
            groups[idx].append(r)
    else:
        k = int(window)
        if k < 1:
            raise ValueError("window count must be >= 1")
        n = len(ordered)
        groups = [ordered[i * n // k : (i + 1) * n // k] for i in range(k)]
    rows = []
    for i, g in enumerate(groups):
        if not g:
            continue
        hits = sum(1 for r in g if hit(r.instruction))
        rows.append(
            {
                "window": i,
                "start": g[0].timestamp.isoformat(),
                "end": g[-1].timestamp.isoformat(),
                "n": len(g),
                "hits": hits,
                "hit_rate": hits / len(g),
            }
        )
    return rows


__all__ = [
    "CorpusRecord",
    "HitReport",
    "IngestError",
    "IngestReport",
    "SplitSpec",
    "dedup",
    "evaluate_hit_rate",
    "filter_pipeline",
    "ingest",
    "make_record",
    "pii_scrubber",
    "repetition_baseline",
    "split",
    "subsample",
    "timeslice_eval",
    "write_corpus",
]
