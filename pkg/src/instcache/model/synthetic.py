"""Context-free synthetic models: uniform and rank power law.

Token ids follow rank order (id 0 is the most probable token); EOS sits at a
configurable rank. Content tokens are labelled a, b, ..., z, aa, ... in id
order, skipping EOS.
"""

from __future__ import annotations

import math

import numpy as np

from .base import ModelSpec, TokenDistribution, TokenModel, token_label


def harmonic_normalizer(vocab_size: int, alpha: float) -> float:
    """Exact beta = 1 / sum_{i=1..V} i^-alpha."""
    ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
    return float(1.0 / math.fsum(ranks ** -alpha))


class ContextFreeModel(TokenModel):
    """Every node has the same ranked children; subclasses supply ``probs``."""

    def __init__(self, probs, eos_id: int, max_len: int = 16, bytes_per_token: int = 256):
        probs = [float(p) for p in probs]
        vocab_size = len(probs)
        spec = ModelSpec(vocab_size, max_len, bos_id=vocab_size, eos_id=eos_id, unk_id=None)
        super().__init__(spec, bytes_per_token)
        self._dist = TokenDistribution.from_pairs(enumerate(probs))
        self._labels = {}
        self._ids = {}
        k = 0
        for tid in range(vocab_size):
            if tid == eos_id:
                continue
            lab = token_label(k)
            self._labels[tid] = lab
            self._ids[lab] = tid
            k += 1

    def _distribution(self, state, top_k, min_prob):
        return self._dist.truncate(top_k, min_prob)

    def prob(self, state, token_id):
        self._check_live(state)
        return self._dist.probs[self._dist.ids.index(token_id)] if self.is_token(token_id) else 0.0

    def token_text(self, token_id):
        if token_id == self.spec.eos_id:
            return "<eos>"
        return self._labels[token_id]

    def encode(self, text):
        try:
            return [self._ids[w] for w in text.split()]
        except KeyError:
            return None

    @property
    def sorted_costs(self) -> np.ndarray:
        """-ln p of every token in rank order."""
        return -np.log(np.asarray(self._dist.probs))


class UniformModel(ContextFreeModel):
    kind = "uniform"

    def __init__(self, vocab_size: int, eos_id: int | None = None, max_len: int = 16, bytes_per_token: int = 256):
        if vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        eos = vocab_size - 1 if eos_id is None else eos_id
        super().__init__([1.0 / vocab_size] * vocab_size, eos, max_len, bytes_per_token)

    def describe(self):
        return f"uniform:v={self.spec.vocab_size},eos={self.spec.eos_id}"

    def clone(self):
        return UniformModel(self.spec.vocab_size, self.spec.eos_id, self.spec.max_len, self.bytes_per_token)


class PowerLawModel(ContextFreeModel):
    """Rank-i probability beta * i^-alpha with beta the exact normaliser."""

    kind = "powerlaw"

    def __init__(
        self,
        vocab_size: int,
        alpha: float,
        eos_rank: int = 1,
        max_len: int = 16,
        bytes_per_token: int = 256,
    ):
        if not alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 1 <= eos_rank <= vocab_size:
            raise ValueError("eos_rank must lie in [1, vocab_size]")
        self.alpha = float(alpha)
        self.beta = harmonic_normalizer(vocab_size, alpha)
        self.eos_rank = eos_rank
        ranks = np.arange(1, vocab_size + 1, dtype=np.float64)
        super().__init__(self.beta * ranks ** -self.alpha, eos_rank - 1, max_len, bytes_per_token)

    def describe(self):
        return f"powerlaw:v={self.spec.vocab_size},alpha={self.alpha!r},eos_rank={self.eos_rank}"

    def clone(self):
        return PowerLawModel(self.spec.vocab_size, self.alpha, self.eos_rank, self.spec.max_len, self.bytes_per_token)
