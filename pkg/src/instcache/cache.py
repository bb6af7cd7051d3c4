"""Exact-match instruction -> response store.

Keys are normalised instructions (lowercase, optional trim and NFC); a hit
requires exact key equality. Stores are filled from a pre-population file
through a responder and can be snapshotted to canonical NDJSON::

    {"format": "instcache-store", "version": 1, "sigma": 3.0, "count": 2}
    {"key": "...", "instruction": "...", "response": "...", "nll": 1.5, "resp_tokens": 12}

Rows are sorted by key, so persist -> load -> persist is byte-identical.
"""

from __future__ import annotations

import json
import logging
import threading
import unicodedata
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping

from .prepopulate import Instruction, read_prepop
from .text import token_count

log = logging.getLogger(__name__)

FORMAT = "instcache-store"
VERSION = 1
ENTRY_OVERHEAD_BYTES = 64


class SnapshotError(ValueError):
    pass


def normalize(instruction: str, trim: bool = True, nfc: bool = False) -> str:
    if nfc:
        instruction = unicodedata.normalize("NFC", instruction)
    if trim:
        instruction = instruction.strip()
    return instruction.lower()


@dataclass(frozen=True)
class CacheEntry:
    instruction: str
    normalized_key: str
    response: str
    nll: float
    response_token_count: int

    @property
    def estimated_bytes(self) -> int:
        return (
            len(self.normalized_key.encode())
            + len(self.instruction.encode())
            + len(self.response.encode())
            + ENTRY_OVERHEAD_BYTES
        )


@dataclass(frozen=True)
class CacheStats:
    entries: int
    lookups: int
    hits: int
    misses: int
    estimated_bytes: int

    @property
    def hit_rate(self) -> float:
        return self.hits / self.lookups if self.lookups else 0.0


class CacheStore:
    """Hash table of cache entries; read-only after loading, lookups thread-safe."""

    def __init__(self, sigma: float | None = None, trim: bool = True, nfc: bool = False):
        self.sigma = sigma
        self.trim = trim
        self.nfc = nfc
        self._entries: dict[str, CacheEntry] = {}
        self._bytes = 0
        self._lock = threading.Lock()
        self._lookups = 0
        self._hits = 0

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, instruction: str) -> bool:
        return self.key(instruction) in self._entries

    def key(self, instruction: str) -> str:
        return normalize(instruction, self.trim, self.nfc)

    def keys(self) -> set[str]:
        return set(self._entries)

    def entries(self) -> list[CacheEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def get_entry(self, instruction: str) -> CacheEntry | None:
        return self._entries.get(self.key(instruction))

    def add(self, instruction: str, response: str, nll: float, response_tokens: int | None = None) -> bool:
        """Insert unless an entry with the same key and lower-or-equal NLL exists."""
        key = self.key(instruction)
        old = self._entries.get(key)
        if old is not None and old.nll <= nll:
            return False
        tokens = token_count(response) if response_tokens is None else int(response_tokens)
        entry = CacheEntry(instruction, key, response, float(nll), tokens)
        if old is not None:
            self._bytes -= old.estimated_bytes
        self._entries[key] = entry
        self._bytes += entry.estimated_bytes
        return True

    def lookup(self, instruction: str) -> str | None:
        entry = self._entries.get(self.key(instruction))
        with self._lock:
            self._lookups += 1
            if entry is not None:
                self._hits += 1
        return None if entry is None else entry.response

    def lookup_entry(self, instruction: str) -> CacheEntry | None:
        entry = self._entries.get(self.key(instruction))
        with self._lock:
            self._lookups += 1
            if entry is not None:
                self._hits += 1
        return entry

    def stats(self) -> CacheStats:
        with self._lock:
            lookups, hits = self._lookups, self._hits
        return CacheStats(len(self._entries), lookups, hits, lookups - hits, self._bytes)

    def reset_stats(self) -> None:
        with self._lock:
            self._lookups = self._hits = 0

    # -- persistence ----------------------------------------------------
    def serialize(self, extra: dict | None = None) -> str:
        """Canonical snapshot text; ``extra`` adds provenance fields to the header."""
        header = dict(extra or {})
        header.update({"format": FORMAT, "version": VERSION, "sigma": self.sigma, "count": len(self._entries)})
        lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
        for e in self.entries():
            row = {
                "key": e.normalized_key,
                "instruction": e.instruction,
                "response": e.response,
                "nll": e.nll,
                "resp_tokens": e.response_token_count,
            }
            lines.append(json.dumps(row, sort_keys=True, ensure_ascii=False))
        return "\n".join(lines) + "\n"

    def persist(self, path, extra: dict | None = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize(extra))


def load_snapshot(path, trim: bool = True, nfc: bool = False) -> CacheStore:
    try:
        with open(path, encoding="utf-8") as fh:
            # records end at "\n" only; raw U+0085/U+2028 can sit inside JSON strings
            lines = fh.read().split("\n")
        lines = lines[:-1] if lines and not lines[-1] else lines
    except UnicodeDecodeError as exc:
        raise SnapshotError(f"{path}: not a text snapshot") from exc
    if not lines:
        raise SnapshotError(f"{path}: empty snapshot")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise SnapshotError(f"{path}:1: corrupt header") from exc
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise SnapshotError(f"{path}: not an {FORMAT} snapshot")
    if header.get("version") != VERSION:
        raise SnapshotError(f"{path}: snapshot version {header.get('version')!r} is not {VERSION}")
    store = CacheStore(header.get("sigma"), trim, nfc)
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            entry = CacheEntry(row["instruction"], row["key"], row["response"], float(row["nll"]), int(row["resp_tokens"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise SnapshotError(f"{path}:{lineno}: corrupt entry") from exc
        store._entries[entry.normalized_key] = entry
        store._bytes += entry.estimated_bytes
    if header.get("count") is not None and header["count"] != len(store):
        raise SnapshotError(f"{path}: header count {header['count']} != {len(store)} entries")
    return store


# -- responders -------------------------------------------------------------

Responder = Callable[[str], str]


def template_responder(instruction: str) -> str:
    return "echo:" + instruction


class CorpusEchoResponder:
    """Answer with the response recorded for the same normalised instruction, else the template."""

    def __init__(self, pairs: Iterable[tuple[str, str]] | Mapping[str, str], trim: bool = True, nfc: bool = False):
        items = pairs.items() if isinstance(pairs, Mapping) else pairs
        self.trim, self.nfc = trim, nfc
        self.table: dict[str, str] = {}
        for instruction, response in items:
            self.table.setdefault(normalize(instruction, trim, nfc), response)

    def __call__(self, instruction: str) -> str:
        return self.table.get(normalize(instruction, self.trim, self.nfc), template_responder(instruction))


class HttpResponder:
    """POST {"instruction": ...} to a completion endpoint and return its "response" field."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint
        self.timeout = timeout

    def __call__(self, instruction: str) -> str:
        from .serving.upstream import post_json

        return post_json(self.endpoint, {"instruction": instruction}, self.timeout)["response"]


def build_store(
    instructions: Iterable[Instruction], responder: Responder, sigma: float | None = None, trim=True, nfc=False
) -> CacheStore:
    store = CacheStore(sigma, trim, nfc)
    skipped = 0
    for ins in instructions:
        try:
            response = responder(ins.text)
        except Exception as exc:  # responder backends are arbitrary; skip and keep loading
            skipped += 1
            log.warning("responder failed for %r: %s", ins.text, exc)
            continue
        store.add(ins.text, response, ins.nll)
    if skipped:
        log.warning("skipped %d instructions after responder failures", skipped)
    return store


def bulk_load(prepop_path, responder: Responder = template_responder, trim=True, nfc=False) -> tuple[CacheStore, CacheStats]:
    header, instructions = read_prepop(prepop_path)
    store = build_store(instructions, responder, header.get("sigma"), trim, nfc)
    return store, store.stats()
