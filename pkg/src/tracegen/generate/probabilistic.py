"""Probabilistic baseline: top-down sampling from fitted corpus statistics."""

from __future__ import annotations

import bisect
import itertools
import random
from collections import Counter, defaultdict
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Any, Hashable

from tracegen.graph import CLIENT, CallGraph, Edge, EdgePath
from tracegen.ingest import CorpusStats, EmptyCorpus, normalize

# duration draws that overflow the parent window before clamping
MAX_DURATION_DRAWS = 8


class Categorical:
    """A finite distribution with cumulative lookup; keys are kept in sorted order."""

    def __init__(self, probs: Mapping[Any, float]) -> None:
        items = sorted(((k, p) for k, p in probs.items() if p > 0), key=lambda kv: _sort_key(kv[0]))
        if not items:
            raise ValueError("distribution has no positive mass")
        total = sum(p for _, p in items)
        self.keys = [k for k, _ in items]
        self.probs = [p / total for _, p in items]
        self._cum = list(itertools.accumulate(self.probs))
        self._cum[-1] = 1.0

    def sample(self, rng: random.Random) -> Any:
        return self.keys[bisect.bisect_right(self._cum, rng.random() * self._cum[-1])]

    def mode(self) -> Any:
        best = max(self.probs)
        return next(k for k, p in zip(self.keys, self.probs) if p == best)

    def restricted(self, keep) -> Categorical | None:
        """Renormalized to keys satisfying ``keep``, or ``None`` when nothing survives."""
        kept = {k: p for k, p in zip(self.keys, self.probs) if keep(k)}
        return Categorical(kept) if kept else None

    def as_dict(self) -> dict[Any, float]:
        return dict(zip(self.keys, self.probs))

    def __len__(self) -> int:
        return len(self.keys)


def _sort_key(k: Hashable) -> tuple:
    return (type(k).__name__, k)


@dataclass(frozen=True)
class ProbModel:
    child_count_dist: dict[int, Categorical]
    comm_type_dist: Categorical
    comm_type_by_level: dict[int, Categorical]
    response_time_dist: dict[str, Categorical]
    destination_dist: dict[tuple[str, str], Categorical]
    destination_by_type: dict[str, Categorical]
    service_dist: Categorical
    depth_dist: Categorical
    edge_count_dist: Categorical

    @property
    def max_level(self) -> int:
        return max(self.child_count_dist)

    def child_counts(self, level: int) -> Categorical:
        # levels deeper than anything seen produce leaves
        return self.child_count_dist.get(level) or Categorical({0: 1.0})

    def comm_types(self, level: int) -> Categorical:
        return self.comm_type_by_level.get(level) or self.comm_type_dist

    def destinations(self, source: str, comm_type: str) -> Categorical:
        dist = self.destination_dist.get((source, comm_type))
        if dist is None:
            dist = self.destination_by_type.get(comm_type)
        if dist is None:
            dist = next(iter(self.destination_by_type.values()))
        return dist

    def durations(self, comm_type: str) -> Categorical:
        dist = self.response_time_dist.get(comm_type)
        if dist is None:
            dist = next(iter(self.response_time_dist.values()))
        return dist


def fit_probabilistic(stats: CorpusStats) -> ProbModel:
    """Normalize corpus counts into sampling distributions.

    Destinations are conditioned on (source, comm type); pairs never seen get
    no entry, so a destination only ever appears where the corpus had it.
    """
    if stats.total_graphs == 0 or not stats.call_freq:
        raise EmptyCorpus("cannot fit a model on empty statistics")
    dest: dict[tuple[str, str], Counter] = defaultdict(Counter)
    dest_by_type: dict[str, Counter] = defaultdict(Counter)
    for (src, dst, typ), n in stats.call_freq.items():
        dest[(src, typ)][dst] += n
        dest_by_type[typ][dst] += n
    return ProbModel(
        child_count_dist={lvl: Categorical(normalize(c)) for lvl, c in stats.child_counts.items() if c},
        comm_type_dist=Categorical(normalize(stats.comm_types)),
        comm_type_by_level={lvl: Categorical(normalize(c)) for lvl, c in stats.comm_types_by_level.items() if c},
        response_time_dist={t: Categorical(normalize(c)) for t, c in stats.response_times.items() if c},
        destination_dist={k: Categorical(normalize(c)) for k, c in dest.items()},
        destination_by_type={t: Categorical(normalize(c)) for t, c in dest_by_type.items()},
        service_dist=Categorical(normalize(stats.services)),
        depth_dist=Categorical(normalize(stats.depths)),
        edge_count_dist=Categorical(normalize(stats.edge_counts)),
    )


def draw_interval(model: ProbModel, comm_type: str, lo: int, hi: int, rng: random.Random) -> tuple[int, int]:
    """A (start, finish) pair inside ``[lo, hi]``.

    The duration is redrawn while it overflows the window, up to
    :data:`MAX_DURATION_DRAWS` times, then clamped; the start is uniform over
    the positions that still fit.
    """
    width = hi - lo
    durations = model.durations(comm_type)
    d = durations.sample(rng)
    for _ in range(MAX_DURATION_DRAWS - 1):
        if d <= width:
            break
        d = durations.sample(rng)
    d = max(0, min(d, width))
    start = rng.randint(lo, hi - d)
    return start, start + d


def sample_probabilistic(
    model: ProbModel,
    root: str = CLIENT,
    max_depth: int | None = None,
    seed: int | str = 0,
    service_id: str | None = None,
    trace_id: str = "",
) -> CallGraph:
    """Sample one graph level by level.

    The root layer is a single call out of ``root``. Every edge at level
    ``l`` then draws its child count from the level-``l`` distribution, and
    each child draws a comm type, a destination given (caller, type), and a
    response time nested in the parent's interval. Edges at ``max_depth``
    get no children.
    """
    rng = random.Random(f"{seed}")
    if service_id is None:
        service_id = model.service_dist.sample(rng)
    limit = max_depth if max_depth is not None else model.max_level
    if limit < 1:
        raise ValueError(f"max_depth must be >= 1, got {max_depth}")

    typ = model.comm_types(1).sample(rng)
    dst = model.destinations(root, typ).sample(rng)
    d = model.durations(typ).sample(rng)
    edges = [Edge((0,), root, dst, typ, 0, d)]
    frontier: list[Edge] = list(edges)
    while frontier:
        parent = frontier.pop(0)
        level = len(parent.edge_id)
        if level >= limit:
            continue
        n = model.child_counts(level).sample(rng)
        for k in range(n):
            typ = model.comm_types(level + 1).sample(rng)
            dst = model.destinations(parent.destination, typ).sample(rng)
            start, finish = draw_interval(model, typ, parent.start_ms, parent.finish_ms, rng)
            child = Edge(parent.edge_id + (k + 1,), parent.destination, dst, typ, start, finish)
            edges.append(child)
            frontier.append(child)
    edges.sort(key=lambda e: e.edge_id)
    return CallGraph(trace_id=trace_id, service_id=service_id, edges=tuple(edges))


def child_count_samples(graphs, level: int | None = None) -> list[int]:
    """Child count of every edge (optionally only those at ``level``), leaves included."""
    out = []
    for g in graphs:
        kids: Counter[EdgePath] = Counter(e.edge_id[:-1] for e in g.edges if len(e.edge_id) > 1)
        out.extend(kids.get(e.edge_id, 0) for e in g.edges if level is None or len(e.edge_id) == level)
    return out
