"""Add-alpha smoothed word n-gram model with suffix backoff for unseen contexts.

Ids 0, 1, 2 are BOS, EOS and UNK; words follow in vocabulary order. The
generatable vocabulary V is EOS plus the kept words, and every distribution
covers V + 1 outcomes (the extra one is UNK)::

    P(w | ctx) = (count(ctx, w) + alpha) / (count(ctx) + alpha * (V + 1))

``ctx`` is the longest suffix (at most ``order - 1`` tokens, BOS included) of
the conditioning history that occurs in training. The empty context always
occurs, so every distribution is well defined even with ``alpha = 0``.

Artifact format (NDJSON, version 1)::

    {"format": "instcache-ngram", "version": 1, "order": n,
     "smoothing_alpha": a, "case_fold": true, "vocab": ["the", ...]}
    {"ctx": [0], "counts": [[1, 4], [5, 2], ...]}     # one row per context

Rows are sorted by (len(ctx), ctx) and counts by token id.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import Counter, defaultdict
from typing import Iterable, Sequence

from ..text import tokenize
from .base import ModelError, ModelSpec, TokenDistribution, TokenModel

BOS, EOS, UNK = 0, 1, 2
SPECIALS = ("<bos>", "<eos>", "<unk>")
FORMAT = "instcache-ngram"
VERSION = 1


class NgramArtifact:
    """Trained counts; serialisable and shared read-only between model handles."""

    def __init__(self, order: int, words: Sequence[str], smoothing_alpha: float, counts, case_fold: bool = True):
        if order < 1:
            raise ValueError("order must be >= 1")
        if smoothing_alpha < 0:
            raise ValueError("smoothing_alpha must be >= 0")
        self.order = order
        self.words = list(words)
        self.smoothing_alpha = float(smoothing_alpha)
        self.case_fold = case_fold
        self.counts: dict[tuple[int, ...], dict[int, int]] = counts
        self.totals = {ctx: sum(c.values()) for ctx, c in counts.items()}
        self.word_ids = {w: i + 3 for i, w in enumerate(self.words)}

    @property
    def vocab_size(self) -> int:
        return len(self.words) + 1

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.serialize())

    def serialize(self) -> str:
        header = {
            "format": FORMAT,
            "version": VERSION,
            "order": self.order,
            "smoothing_alpha": self.smoothing_alpha,
            "case_fold": self.case_fold,
            "vocab": self.words,
        }
        lines = [json.dumps(header, ensure_ascii=False)]
        for ctx in sorted(self.counts, key=lambda c: (len(c), c)):
            row = {"ctx": list(ctx), "counts": [[t, n] for t, n in sorted(self.counts[ctx].items())]}
            lines.append(json.dumps(row))
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.serialize().encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "NgramArtifact":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        lines = lines[:-1] if lines and not lines[-1] else lines
        if not lines:
            raise ModelError(f"{path}: empty n-gram artifact")
        try:
            header = json.loads(lines[0])
        except ValueError as exc:
            raise ModelError(f"{path}:1: corrupt header") from exc
        if not isinstance(header, dict) or header.get("format") != FORMAT or header.get("version") != VERSION:
            raise ModelError(f"{path}: not an {FORMAT} v{VERSION} artifact")
        counts = {}
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                counts[tuple(row["ctx"])] = {int(t): int(n) for t, n in row["counts"]}
            except (ValueError, KeyError, TypeError) as exc:
                raise ModelError(f"{path}:{lineno}: corrupt count row") from exc
        return cls(header["order"], header["vocab"], header["smoothing_alpha"], counts, header.get("case_fold", True))


def train_ngram(
    corpus: Iterable[Sequence[str]],
    order: int = 3,
    smoothing_alpha: float = 0.01,
    vocab_cap: int = 8192,
) -> NgramArtifact:
    """Count n-grams over word sequences (BOS/EOS padding is added here).

    ``vocab_cap`` is V: EOS plus the ``vocab_cap - 1`` most frequent words
    (ties broken alphabetically); rarer words become UNK.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if vocab_cap < 2:
        raise ValueError("vocab_cap must be >= 2")
    seqs = [list(s) for s in corpus]
    if not seqs:
        raise ValueError("cannot train on an empty corpus")
    freq = Counter(w for s in seqs for w in s)
    ranked = sorted(freq.items(), key=lambda kv: (-kv[1], kv[0]))
    words = sorted(w for w, _ in ranked[: vocab_cap - 1])
    ids = {w: i + 3 for i, w in enumerate(words)}
    counts: dict[tuple[int, ...], dict[int, int]] = defaultdict(lambda: defaultdict(int))
    for s in seqs:
        padded = [BOS] + [ids.get(w, UNK) for w in s] + [EOS]
        for j in range(1, len(padded)):
            tok = padded[j]
            for k in range(0, order):
                if j - k < 0:
                    break
                counts[tuple(padded[j - k : j])][tok] += 1
    frozen = {ctx: dict(c) for ctx, c in counts.items()}
    return NgramArtifact(order, words, smoothing_alpha, frozen)


def train_ngram_texts(texts: Iterable[str], order=3, smoothing_alpha=0.01, vocab_cap=8192, case_fold=True):
    art = train_ngram((tokenize(t, case_fold) for t in texts), order, smoothing_alpha, vocab_cap)
    art.case_fold = case_fold
    return art


class NgramModel(TokenModel):
    kind = "ngram"

    def __init__(self, artifact: NgramArtifact, max_len: int = 32, bytes_per_token: int = 256):
        spec = ModelSpec(artifact.vocab_size, max_len, bos_id=BOS, eos_id=EOS, unk_id=UNK)
        super().__init__(spec, bytes_per_token)
        self.artifact = artifact
        self._outcomes = artifact.vocab_size + 1
        self._seen_cache: dict[tuple[int, ...], tuple] = {}

    def __getstate__(self):
        d = super().__getstate__()
        d["_seen_cache"] = {}
        return d

    @classmethod
    def from_path(cls, path, max_len=32, bytes_per_token=256) -> "NgramModel":
        return cls(NgramArtifact.load(path), max_len, bytes_per_token)

    def is_token(self, token_id):
        return 1 <= token_id < len(self.artifact.words) + 3

    def conditioning(self, context: Sequence[int]) -> tuple[int, ...]:
        """Longest observed suffix of BOS + context, at most order-1 tokens."""
        hist = (BOS,) + tuple(context)
        n = self.artifact.order - 1
        hist = hist[len(hist) - n :] if n > 0 else ()
        for start in range(len(hist) + 1):
            ctx = hist[start:]
            if self.artifact.totals.get(ctx, 0) > 0:
                return ctx
        raise ModelError("n-gram artifact has no unigram counts")

    def _seen(self, ctx):
        cached = self._seen_cache.get(ctx)
        if cached is None:
            a = self.artifact.smoothing_alpha
            denom = self.artifact.totals[ctx] + a * self._outcomes
            seen = sorted(self.artifact.counts[ctx].items(), key=lambda e: (-e[1], e[0]))
            ids = tuple(t for t, _ in seen)
            probs = tuple((n + a) / denom for _, n in seen)
            floor = a / denom
            cached = (ids, probs, floor, frozenset(ids))
            if len(self._seen_cache) < 200_000:
                self._seen_cache[ctx] = cached
        return cached

    def _distribution(self, state, top_k, min_prob):
        ids, probs, floor, seen = self._seen(self.conditioning(state.context))
        dist = TokenDistribution(ids, probs).truncate(top_k, min_prob)
        room = None if top_k is None else top_k - len(dist)
        if floor <= 0.0 or floor < min_prob or len(dist) < len(ids) or room == 0:
            return dist
        # unseen outcomes share the floor and rank below every seen one
        extra = []
        for t in range(1, self._outcomes + 1):
            if t not in seen:
                extra.append(t)
                if room is not None and len(extra) >= room:
                    break
        return TokenDistribution(dist.ids + tuple(extra), dist.probs + (floor,) * len(extra))

    def prob(self, state, token_id):
        self._check_live(state)
        return self.prob_given(state.context, token_id)

    def prob_given(self, context: Sequence[int], token_id: int) -> float:
        ctx = self.conditioning(context)
        ids, probs, floor, seen = self._seen(ctx)
        if token_id in seen:
            return probs[ids.index(token_id)]
        return floor if self.is_token(token_id) else 0.0

    def token_text(self, token_id):
        if token_id < 3:
            return SPECIALS[token_id]
        return self.artifact.words[token_id - 3]

    def encode(self, text):
        toks = [self.artifact.word_ids.get(w, UNK) for w in tokenize(text, self.artifact.case_fold)]
        return None if UNK in toks else toks

    def describe(self):
        return f"ngram:{self.artifact.digest()}"

    def clone(self):
        return NgramModel(self.artifact, self.spec.max_len, self.bytes_per_token)


def nll_given(model: NgramModel, tokens: Sequence[int]) -> float:
    """Direct NLL of a full token sequence (content + EOS) without the state API."""
    total = 0.0
    for j, t in enumerate(tokens):
        p = model.prob_given(tokens[:j], t)
        if p <= 0.0:
            return math.inf
        total += -math.log(p)
    return total
