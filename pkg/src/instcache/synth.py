"""Seeded synthetic instruction corpus with Zipf-weighted template slots.

Used for desk-scale experiments where the real chat corpora are not
available. ``drift_at`` swaps the slot vocabularies for a disjoint set from
that fraction of the stream onward, which models a shift in what users ask.
"""

from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone

import numpy as np

from .dataset import CorpusRecord, make_record

TOPICS = [
    "aigc", "personality development", "quantum computing", "spiritual science", "method statement",
    "machine learning", "deep learning", "prompt engineering", "self-attention", "cloud computing",
    "blockchain", "climate change", "photosynthesis", "inflation", "democracy", "the internet",
    "a neural network", "security technology management", "data science", "linear regression",
    "game theory", "supply chain management", "renewable energy", "black holes", "the stock market",
    "bayesian statistics", "object oriented programming", "recursion", "a hash table", "docker",
]
LANGS = ["python", "rust", "c++", "javascript", "java", "go", "sql", "bash"]
TASKS = [
    "sort a list", "read a file", "reverse a string", "compute the fibonacci sequence",
    "find the maximum depth of a binary tree", "parse json", "send an email", "scrape a website",
    "generate random numbers", "merge two dictionaries", "build a web server", "train a model",
]
THINGS = ["discord bot", "web server", "calculator", "to-do app", "chess engine", "chat bot", "snake game"]
SHOWS = ["spongebob", "simpsons", "friends", "star trek", "doctor who"]
STYLES = ["a poem", "a short story", "a rap", "an essay", "a haiku", "a song"]

DRIFT_TOPICS = [
    "large language models", "retrieval augmented generation", "vector databases", "diffusion models",
    "agentic workflows", "mixture of experts", "kv caching", "speculative decoding", "lora fine-tuning",
    "rlhf", "tokenizers", "quantization", "sparse attention", "function calling", "multimodal models",
]
DRIFT_LANGS = ["kotlin", "swift", "zig", "haskell", "elixir"]
DRIFT_THINGS = ["browser extension", "telegram bot", "rest api", "mobile app", "slack bot"]

TEMPLATES = [
    ("what is {topic}?", 10.0),
    ("explain {topic}", 6.0),
    ("what is the difference between {topic} and {topic2}?", 2.0),
    ("write a {lang} program to {task}", 5.0),
    ("how do i {task} in {lang}?", 4.0),
    ("create a {lang} {thing}", 3.0),
    ("write {style} about {topic}", 3.0),
    ("make a {show} episode", 1.0),
    ("teach me {topic}", 1.5),
]


def _zipf_weights(n: int, s: float) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** -s
    return w / w.sum()


class InstructionGenerator:
    def __init__(self, seed: int = 0, zipf_s: float = 1.1, drifted: bool = False):
        self.rng = np.random.default_rng(seed)
        self.zipf_s = zipf_s
        self.slots = {
            "topic": DRIFT_TOPICS if drifted else TOPICS,
            "lang": DRIFT_LANGS if drifted else LANGS,
            "task": TASKS,
            "thing": DRIFT_THINGS if drifted else THINGS,
            "show": SHOWS,
            "style": STYLES,
        }
        self._w = {k: _zipf_weights(len(v), zipf_s) for k, v in self.slots.items()}
        tw = np.array([w for _, w in TEMPLATES])
        self._tw = tw / tw.sum()

    def _pick(self, slot: str) -> str:
        vals = self.slots[slot]
        return vals[self.rng.choice(len(vals), p=self._w[slot])]

    def instruction(self) -> str:
        tpl = TEMPLATES[self.rng.choice(len(TEMPLATES), p=self._tw)][0]
        fill = {k: self._pick(k) for k in ("topic", "lang", "task", "thing", "show", "style")}
        fill["topic2"] = self._pick("topic")
        return tpl.format(**fill)

    def response(self, instruction: str) -> str:
        n = int(self.rng.integers(16, 96))
        return f"here is an answer to {instruction} " + " ".join(f"w{int(x)}" for x in self.rng.integers(0, 50, n))


def synthetic_corpus(
    n: int,
    seed: int = 0,
    drift_at: float | None = None,
    start: datetime = datetime(2024, 1, 1, tzinfo=timezone.utc),
    step: timedelta = timedelta(minutes=1),
    n_ips: int = 500,
    zipf_s: float = 1.1,
) -> list[CorpusRecord]:
    """``n`` first-turn records with timestamps ``step`` apart and hashed IPs."""
    base = InstructionGenerator(seed, zipf_s)
    shifted = InstructionGenerator(seed + 1, zipf_s, drifted=True)
    ip_rng = random.Random(seed)
    cut = n if drift_at is None else int(round(n * drift_at))
    out = []
    for i in range(n):
        gen = base if i < cut else shifted
        text = gen.instruction()
        out.append(
            make_record(f"c{i:07d}", 0, text, gen.response(text), f"ip{ip_rng.randrange(n_ips):04d}", start + i * step)
        )
    return out
