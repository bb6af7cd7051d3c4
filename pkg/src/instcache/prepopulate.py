"""Bounded depth-first enumeration of every instruction with NLL <= sigma.

The search walks the model's text tree from BOS. Children are visited in
descending probability order; a child whose cumulative NLL exceeds sigma is
cut together with its whole subtree, which is safe because NLL only grows
along a path. EOS children are emitted as instructions and never expanded.

State lifetime: a pending child keeps its parent's state alive; the child's
own state is created when it is popped and released once its subtree is
exhausted, after which the parent's outstanding-children count drops. Live
states are therefore the current DFS path plus the batch in flight.
"""

from __future__ import annotations

import json
import logging
import math
import sys
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from .kernels import NLL_TOL
from .model.base import ModelError, TokenModel

log = logging.getLogger(__name__)

FORMAT = "instcache-prepop"
VERSION = 1


class PrepopError(RuntimeError):
    pass


class StateBudgetExceeded(PrepopError):
    pass


@dataclass
class PrepopConfig:
    sigma: float
    max_len: int
    min_len: int = 1
    batch_size: int = 1
    workers: int = 1
    split_depth: int = 1
    max_live_states: int | None = None
    strategy: str = "dfs"
    executor: str = "thread"

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if not 0 <= self.min_len <= self.max_len:
            raise ValueError("min_len must lie in [0, max_len]")
        if self.batch_size < 1 or self.workers < 1:
            raise ValueError("batch_size and workers must be >= 1")
        if self.strategy not in ("dfs", "bfs"):
            raise ValueError("strategy must be 'dfs' or 'bfs'")
        if self.executor not in ("serial", "thread", "process"):
            raise ValueError("executor must be serial, thread or process")


@dataclass(frozen=True, order=True)
class Instruction:
    nll: float
    text: str
    tokens: tuple[int, ...]

    def to_json(self) -> str:
        return json.dumps({"instruction": self.text, "tokens": list(self.tokens), "nll": self.nll}, ensure_ascii=False)


@dataclass
class PrepopStats:
    nodes_expanded: int = 0
    nodes_pruned: int = 0
    wall_time: float = 0.0
    retained_state_high_water_bytes: int = 0
    high_water_states: int = 0
    model_calls: int = 0

    def merge(self, other: "PrepopStats") -> None:
        self.nodes_expanded += other.nodes_expanded
        self.nodes_pruned += other.nodes_pruned
        self.model_calls += other.model_calls
        self.retained_state_high_water_bytes = max(
            self.retained_state_high_water_bytes, other.retained_state_high_water_bytes
        )
        self.high_water_states = max(self.high_water_states, other.high_water_states)


@dataclass
class PrepopResult:
    instructions: list[Instruction]
    stats: PrepopStats
    config: PrepopConfig | None = None

    @property
    def texts(self) -> set[str]:
        return {i.text for i in self.instructions}

    @property
    def paths(self) -> set[tuple[int, ...]]:
        return {i.tokens for i in self.instructions}


@dataclass(frozen=True)
class FrontierNode:
    path: tuple[int, ...]
    cum_nll: float


@dataclass
class Partition:
    shallow: list[Instruction]
    shares: list[list[FrontierNode]]
    stats: PrepopStats = field(default_factory=PrepopStats)


class _Node:
    __slots__ = ("state", "path", "cum", "parent", "pending")

    def __init__(self, state, path, cum, parent):
        self.state = state
        self.path = path
        self.cum = cum
        self.parent = parent
        self.pending = 0


def _support_size(model: TokenModel) -> int:
    return model.spec.vocab_size + (1 if model.spec.unk_id is not None else 0)


def _search(
    model: TokenModel,
    config: PrepopConfig,
    starts: Sequence[tuple[object, tuple[int, ...], float]],
    frontier_depth: int | None = None,
    own_starts: bool = False,
):
    """Core loop shared by the single-worker, partition and worker phases.

    ``starts`` are (state, path, cum_nll) triples; their states are released
    at the end only when ``own_starts`` is set. Returns (instructions,
    frontier, stats).
    """
    sigma = config.sigma
    bound = sigma + NLL_TOL
    L = config.max_len
    eos = model.spec.eos_id
    support = _support_size(model)
    stats = PrepopStats()
    out: list[Instruction] = []
    frontier: list[FrontierNode] = []
    live: dict[int, _Node] = {}
    cap = config.max_live_states
    bfs = config.strategy == "bfs"

    def finish(node: _Node) -> None:
        while node is not None and node.pending == 0:
            parent = node.parent
            if node.state is not None:
                if node.parent is not None or own_starts:
                    model.release(node.state)
                live.pop(id(node), None)
                node.state = None
            if parent is None:
                return
            parent.pending -= 1
            node = parent

    # pending entries: (parent node, token, child cum)
    pending: deque = deque()
    ready: list[_Node] = []
    for state, path, cum in starts:
        node = _Node(state, tuple(path), cum, None)
        live[id(node)] = node
        ready.append(node)

    t0 = time.perf_counter()
    try:
        while ready or pending:
            batch = ready
            ready = []
            while pending and len(batch) < config.batch_size:
                parent, tok, cum = pending.popleft() if bfs else pending.pop()
                node = _Node(model.extend(parent.state, tok), parent.path + (tok,), cum, parent)
                live[id(node)] = node
                batch.append(node)
            if cap is not None and model.live_states > cap:
                raise StateBudgetExceeded(f"{model.live_states} live states exceed the cap of {cap}")
            if not batch:
                continue
            dists = model.distributions(
                [n.state for n in batch],
                min_prob=[math.exp(-(bound - n.cum)) * (1.0 - 1e-12) for n in batch],
            )
            stats.nodes_expanded += len(batch)
            # push in reverse so the first node of the batch ends up on top
            order = range(len(batch)) if bfs else range(len(batch) - 1, -1, -1)
            for j in order:
                node, dist = batch[j], dists[j]
                depth = len(node.path)
                kids = []
                taken = 0
                for tok, p in dist:
                    c = node.cum - math.log(p)
                    if c > bound:
                        break
                    taken += 1
                    if tok == eos:
                        if depth >= config.min_len:
                            out.append(Instruction(c, model.decode(node.path), node.path + (eos,)))
                    elif not model.expandable(tok):
                        continue
                    elif depth + 1 >= L:
                        # no room left for EOS below this child
                        continue
                    elif frontier_depth is not None and depth + 1 >= frontier_depth:
                        frontier.append(FrontierNode(node.path + (tok,), c))
                    else:
                        kids.append((tok, c))
                stats.nodes_pruned += support - taken
                node.pending = len(kids)
                if bfs:
                    pending.extend((node, tok, c) for tok, c in kids)
                else:
                    pending.extend((node, tok, c) for tok, c in reversed(kids))
                if not kids:
                    finish(node)
    except BaseException as exc:
        for node in list(live.values()):
            st = node.state
            if st is not None and not st.released and (node.parent is not None or own_starts):
                try:
                    model.release(st)
                except ModelError:
                    pass
        if isinstance(exc, ModelError):
            raise PrepopError(f"model failed during pre-population: {exc}") from exc
        raise
    stats.wall_time = time.perf_counter() - t0
    return out, frontier, stats


def _sorted(instructions: Iterable[Instruction]) -> list[Instruction]:
    return sorted(instructions, key=lambda i: (i.nll, i.text, i.tokens))


def prepopulate(model: TokenModel, config: PrepopConfig) -> PrepopResult:
    """Single-worker threshold search, depth-first (or BFS when ``config.strategy == 'bfs'``)."""
    if config.workers > 1:
        return parallel_prepopulate(model, config)
    model.reset_high_water()
    calls0 = model.model_calls
    t0 = time.perf_counter()
    root = model.root_state()
    out, _, stats = _search(model, config, [(root, (), 0.0)])
    stats.wall_time = time.perf_counter() - t0
    stats.retained_state_high_water_bytes = model.high_water_bytes
    stats.high_water_states = model.high_water_states
    stats.model_calls = model.model_calls - calls0
    return PrepopResult(_sorted(out), stats, config)


def partition_frontier(model: TokenModel, config: PrepopConfig, split_depth: int, workers: int) -> Partition:
    """Search to ``split_depth`` and deal the frontier out round-robin.

    Frontier nodes are ordered by remaining NLL budget, largest first (ties by
    path), so heavy subtrees are spread across workers.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if not 1 <= split_depth < config.max_len:
        raise ValueError("split_depth must lie in [1, max_len)")
    model.reset_high_water()
    root = model.root_state()
    shallow, frontier, stats = _search(model, config, [(root, (), 0.0)], frontier_depth=split_depth)
    frontier.sort(key=lambda f: (-(config.sigma - f.cum_nll), f.path))
    shares: list[list[FrontierNode]] = [[] for _ in range(workers)]
    for i, f in enumerate(frontier):
        shares[i % workers].append(f)
    stats.retained_state_high_water_bytes = model.high_water_bytes
    stats.high_water_states = model.high_water_states
    return Partition(shallow, shares, stats)


def search_subtrees(model: TokenModel, config: PrepopConfig, nodes: Sequence[FrontierNode]):
    """Worker body: rebuild each frontier node's state from the root and search below it."""
    model.reset_high_water()
    calls0 = model.model_calls
    out: list[Instruction] = []
    stats = PrepopStats()
    t0 = time.perf_counter()
    root = model.root_state()
    for f in nodes:
        state = root
        for tok in f.path:
            nxt = model.extend(state, tok)
            if state is not root:
                model.release(state)
            state = nxt
        found, _, st = _search(model, config, [(state, f.path, f.cum_nll)], own_starts=True)
        out.extend(found)
        stats.merge(st)
    stats.wall_time = time.perf_counter() - t0
    stats.retained_state_high_water_bytes = model.high_water_bytes
    stats.high_water_states = model.high_water_states
    stats.model_calls = model.model_calls - calls0
    return out, stats


def _worker_entry(args):
    model, config, nodes = args
    try:
        return search_subtrees(model, config, nodes)
    finally:
        if model.kind == "external":
            model.close()


def parallel_prepopulate(model: TokenModel, config: PrepopConfig, split_depth: int | None = None) -> PrepopResult:
    """Partitioned search; the merged set equals the single-worker result."""
    k = config.workers
    depth = config.split_depth if split_depth is None else split_depth
    t0 = time.perf_counter()
    if depth >= config.max_len:
        single = PrepopConfig(**{**asdict(config), "workers": 1})
        return prepopulate(model, single)
    part = partition_frontier(model, config, depth, k)
    jobs = [(model.clone(), config, share) for share in part.shares]
    if config.executor == "serial" or k == 1:
        results = [_worker_entry(j) for j in jobs]
    elif config.executor == "process" and model.kind != "external":
        with ProcessPoolExecutor(max_workers=k) as pool:
            results = list(pool.map(_worker_entry, jobs))
    else:
        with ThreadPoolExecutor(max_workers=k) as pool:
            results = list(pool.map(_worker_entry, jobs))
    stats = part.stats
    merged = list(part.shallow)
    for found, st in results:
        merged.extend(found)
        stats.merge(st)
    stats.wall_time = time.perf_counter() - t0
    return PrepopResult(_sorted(merged), stats, config)


def profile_prepopulation(model: TokenModel, sigmas: Sequence[float], config: PrepopConfig, repeats: int = 1) -> list[dict]:
    """One row per sigma: count, best-of-``repeats`` wall time, node and memory counters."""
    if len(sigmas) < 2:
        raise ValueError("profiling needs at least two sigma values")
    rows = []
    for sigma in sigmas:
        cfg = PrepopConfig(**{**asdict(config), "sigma": float(sigma)})
        best = None
        for _ in range(max(1, repeats)):
            res = prepopulate(model, cfg)
            if best is None or res.stats.wall_time < best.stats.wall_time:
                best = res
        rows.append(
            {
                "sigma": float(sigma),
                "instructions": len(best.instructions),
                "wall_time_s": best.stats.wall_time,
                "nodes_expanded": best.stats.nodes_expanded,
                "nodes_pruned": best.stats.nodes_pruned,
                "high_water_bytes": best.stats.retained_state_high_water_bytes,
                "high_water_states": best.stats.high_water_states,
                "workers": cfg.workers,
                "strategy": cfg.strategy,
            }
        )
    return rows


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> tuple[float, float, float]:
    """Least-squares line y = a + b x; returns (a, b, R^2)."""
    import numpy as np

    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    b, a = np.polyfit(x, y, 1)
    resid = y - (a + b * x)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


# -- NDJSON output --------------------------------------------------------

def write_prepop(path, result: PrepopResult, model_digest: str, extra: dict | None = None) -> None:
    cfg = result.config
    header = {
        "format": FORMAT,
        "version": VERSION,
        "sigma": cfg.sigma if cfg else None,
        "max_len": cfg.max_len if cfg else None,
        "model_digest": model_digest,
        "count": len(result.instructions),
    }
    if extra:
        header.update(extra)
    lines = [json.dumps(header, sort_keys=True, ensure_ascii=False)]
    lines.extend(ins.to_json() for ins in result.instructions)
    text = "\n".join(lines) + "\n"
    if path == "-":
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def read_prepop(path) -> tuple[dict, list[Instruction]]:
    """Parse a pre-population file; malformed lines raise ``ValueError`` naming the line."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
        lines = lines[:-1] if lines and not lines[-1] else lines
    if not lines:
        raise ValueError(f"{path}: empty pre-population file")
    try:
        header = json.loads(lines[0])
    except ValueError as exc:
        raise ValueError(f"{path}:1: malformed header") from exc
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}:1: not an {FORMAT} file")
    if header.get("version") != VERSION:
        raise ValueError(f"{path}:1: unsupported version {header.get('version')!r}")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            out.append(Instruction(float(row["nll"]), str(row["instruction"]), tuple(int(t) for t in row["tokens"])))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: malformed instruction row") from exc
    return header, out
