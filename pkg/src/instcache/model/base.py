"""Next-token model contract shared by every model implementation.

A model exposes a V-ary text tree: ``root_state`` is the BOS node,
``distribution`` lists the ranked children of a node and ``extend`` moves to
a child. Every live state is tracked in a byte ledger so that search code can
be audited for how much conditioning context it keeps alive.
"""

from __future__ import annotations

import hashlib
import math
import threading
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

PROB_SUM_TOL = 1e-9


class ModelError(RuntimeError):
    """Raised for invalid model usage or a failing model backend."""


class StateReleasedError(ModelError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    vocab_size: int
    max_len: int
    bos_id: int
    eos_id: int
    unk_id: int | None = None

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2 (EOS plus one content token)")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.bos_id == self.eos_id:
            raise ValueError("bos_id and eos_id must differ")


@dataclass(frozen=True)
class TokenDistribution:
    """Ranked next-token probabilities: descending probability, ties by ascending id."""

    ids: tuple[int, ...]
    probs: tuple[float, ...]

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]]) -> "TokenDistribution":
        ordered = sorted(pairs, key=lambda e: (-e[1], e[0]))
        return cls(tuple(int(i) for i, _ in ordered), tuple(float(p) for _, p in ordered))

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.ids, self.probs))

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(zip(self.ids, self.probs))

    def truncate(self, top_k: int | None = None, min_prob: float = 0.0) -> "TokenDistribution":
        n = len(self.ids)
        if min_prob > 0.0:
            # probs are non-increasing, so the cut is a prefix
            lo, hi = 0, n
            while lo < hi:
                mid = (lo + hi) // 2
                if self.probs[mid] >= min_prob:
                    lo = mid + 1
                else:
                    hi = mid
            n = lo
        if top_k is not None:
            n = min(n, top_k)
        if n == len(self.ids):
            return self
        return TokenDistribution(self.ids[:n], self.probs[:n])

    def prob_of(self, token_id: int) -> float:
        try:
            return self.probs[self.ids.index(token_id)]
        except ValueError:
            return 0.0

    def check(self, complete: bool = True) -> None:
        """Raise ``ValueError`` if the ordering or normalisation invariants fail."""
        for a, b, ia, ib in zip(self.probs, self.probs[1:], self.ids, self.ids[1:]):
            if b > a or (b == a and ib <= ia):
                raise ValueError("distribution is not in canonical rank order")
        if any(not (0.0 < p <= 1.0) for p in self.probs):
            raise ValueError("probabilities must lie in (0, 1]")
        if complete and abs(math.fsum(self.probs) - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {math.fsum(self.probs)!r}, not 1")


@dataclass(eq=False)
class ModelState:
    """Handle on one tree node.

    ``context`` holds the token ids after BOS; ``handle`` is backend-specific
    (the remote state id for the external adapter).
    """

    state_id: int
    depth: int
    retained_bytes: int
    context: tuple[int, ...] = ()
    handle: Any = field(default=None, repr=False)
    released: bool = field(default=False, repr=False)


def token_label(index: int) -> str:
    """Bijective base-26 label: 0 -> 'a', 25 -> 'z', 26 -> 'aa'."""
    out = []
    index += 1
    while index > 0:
        index, rem = divmod(index - 1, 26)
        out.append(chr(ord("a") + rem))
    return "".join(reversed(out))


class TokenModel:
    """Base class; subclasses implement ``_distribution`` and ``token_text``.

    Ledger: each live state retains ``bytes_per_token`` bytes (its own
    token's share of the context cache), including the root's BOS share.
    """

    kind = "abstract"

    def __init__(self, spec: ModelSpec, bytes_per_token: int = 256):
        self.spec = spec
        self.bytes_per_token = int(bytes_per_token)
        self._lock = threading.Lock()
        self._live: dict[int, ModelState] = {}
        self._next_id = 0
        self._root: ModelState | None = None
        self.retained_bytes = 0
        self.high_water_bytes = 0
        self.high_water_states = 0
        self.model_calls = 0

    def __getstate__(self):
        # pickled for process workers: ship parameters only, with a fresh ledger
        d = self.__dict__.copy()
        d.pop("_lock", None)
        d.update(_live={}, _next_id=0, _root=None, retained_bytes=0, high_water_bytes=0,
                 high_water_states=0, model_calls=0)
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._lock = threading.Lock()

    # -- ledger ---------------------------------------------------------
    def _register(self, depth: int, context: tuple[int, ...], handle: Any = None) -> ModelState:
        with self._lock:
            state = ModelState(self._next_id, depth, self.bytes_per_token, context, handle)
            self._next_id += 1
            self._live[state.state_id] = state
            self.retained_bytes += state.retained_bytes
            self.high_water_bytes = max(self.high_water_bytes, self.retained_bytes)
            self.high_water_states = max(self.high_water_states, len(self._live))
        return state

    def _check_live(self, state: ModelState) -> None:
        if state.released or state.state_id not in self._live:
            raise StateReleasedError(f"state {state.state_id} has been released")

    @property
    def live_states(self) -> int:
        return len(self._live)

    @property
    def non_root_live_states(self) -> int:
        root_live = self._root is not None and self._root.state_id in self._live
        return len(self._live) - (1 if root_live else 0)

    def reset_high_water(self) -> None:
        with self._lock:
            self.high_water_bytes = self.retained_bytes
            self.high_water_states = len(self._live)

    # -- tree API -------------------------------------------------------
    def root_state(self) -> ModelState:
        if self._root is None or self._root.released:
            self._root = self._register(0, (), self._root_handle())
        return self._root

    def extend(self, state: ModelState, token_id: int) -> ModelState:
        self._check_live(state)
        if token_id == self.spec.eos_id:
            raise ModelError("cannot extend past EOS")
        if token_id == self.spec.bos_id or not self.is_token(token_id):
            raise ModelError(f"token {token_id} is not in the vocabulary")
        handle = self._extend_handle(state, token_id)
        return self._register(state.depth + 1, state.context + (token_id,), handle)

    def release(self, state: ModelState) -> None:
        with self._lock:
            if state.released or state.state_id not in self._live:
                raise StateReleasedError(f"state {state.state_id} released twice")
            state.released = True
            del self._live[state.state_id]
            self.retained_bytes -= state.retained_bytes
        self._release_handle(state)

    def distribution(
        self, state: ModelState, top_k: int | None = None, min_prob: float = 0.0
    ) -> TokenDistribution:
        self._check_live(state)
        if top_k is not None and top_k < 1:
            raise ValueError("top_k must be positive")
        self.model_calls += 1
        return self._distribution(state, top_k, min_prob)

    def distributions(
        self, states: Sequence[ModelState], top_k: int | None = None, min_prob: float | Sequence[float] = 0.0
    ) -> list[TokenDistribution]:
        """Batched ``distribution``; backends with round-trip cost override this."""
        if isinstance(min_prob, (int, float)):
            min_prob = [float(min_prob)] * len(states)
        return [self.distribution(s, top_k, m) for s, m in zip(states, min_prob)]

    def prob(self, state: ModelState, token_id: int) -> float:
        self._check_live(state)
        return self._distribution(state, None, 0.0).prob_of(token_id)

    # -- text -----------------------------------------------------------
    def is_token(self, token_id: int) -> bool:
        return 0 <= token_id < self.spec.vocab_size

    def expandable(self, token_id: int) -> bool:
        """Whether search may descend through this token (never for UNK)."""
        return token_id != self.spec.unk_id

    def token_text(self, token_id: int) -> str:
        raise NotImplementedError

    def decode(self, tokens: Sequence[int]) -> str:
        eos = self.spec.eos_id
        return " ".join(self.token_text(t) for t in tokens if t != eos)

    def encode(self, text: str) -> list[int] | None:
        """Content token ids for ``text`` (no BOS/EOS), or None if not representable."""
        raise NotImplementedError

    def digest(self) -> str:
        return hashlib.sha256(self.describe().encode()).hexdigest()[:16]

    def describe(self) -> str:
        return f"{self.kind}:{self.spec}"

    def clone(self) -> "TokenModel":
        """Fresh handle on the same model with its own state ledger."""
        raise NotImplementedError

    # -- backend hooks --------------------------------------------------
    def _root_handle(self) -> Any:
        return None

    def _extend_handle(self, state: ModelState, token_id: int) -> Any:
        return None

    def _release_handle(self, state: ModelState) -> None:
        pass

    def _distribution(self, state: ModelState, top_k: int | None, min_prob: float) -> TokenDistribution:
        raise NotImplementedError

    def close(self) -> None:
        pass
