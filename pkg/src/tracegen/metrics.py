"""Evaluation metrics for synthetic call graphs.

All functions are pure. Distances between empirical distributions use the
normalized 1-D earth mover's distance; call-distribution divergence uses
KL over the reference corpus's most popular calls.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
from collections import Counter
from collections.abc import Callable, Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any

from tracegen.generate.backends import Backend, BackendError, CompletionParams
from tracegen.generate.driver import GenerationFailed, Limits, recursive_generate
from tracegen.graph import CLIENT, ROOT_CALLER, CallGraph, LayerConditions, canonical_hash
from tracegen.ingest import EmptyCorpus

Triple = tuple[str, str, str]


class InsufficientSupport(ValueError):
    pass


class EmptySamples(ValueError):
    pass


@dataclass(frozen=True)
class CallDistribution:
    support: tuple[Triple, ...]
    probs: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(set(self.support)) != len(self.support):
            raise ValueError("support entries must be unique")
        if self.probs and abs(sum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {sum(self.probs)}")

    def as_dict(self) -> dict[Triple, float]:
        return dict(zip(self.support, self.probs))


def call_counts(graphs: Iterable[CallGraph]) -> Counter:
    return Counter(e.triple for g in graphs for e in g.edges)


def _top(counts: Mapping[Any, int], n: int) -> list:
    # most frequent first, ties lexicographic
    return [k for k, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:n]]


def popular_call_distribution(graphs: Sequence[CallGraph], top_n: int = 100) -> CallDistribution:
    counts = call_counts(graphs)
    if not counts:
        raise EmptyCorpus("no edges to count")
    support = _top(counts, top_n)
    total = sum(counts[t] for t in support)
    return CallDistribution(tuple(support), tuple(counts[t] / total for t in support))


def kl_divergence(p: Sequence[float], q: Sequence[float], base: float = math.e) -> float:
    return sum(pi * math.log(pi / qi, base) for pi, qi in zip(p, q) if pi > 0)


def kl_popular_calls(
    real: Sequence[CallGraph],
    synthetic: Sequence[CallGraph],
    top_n: int = 100,
    eps: float = 1e-6,
    base: float = math.e,
) -> float:
    """KL(P || Q) over the real corpus's ``top_n`` calls, in nats unless ``base`` says otherwise.

    Q is the synthetic frequency of the same calls, renormalized over that
    support after flooring each entry at ``eps``.
    """
    p = popular_call_distribution(real, top_n)
    syn = call_counts(synthetic)
    if not syn:
        raise EmptyCorpus("synthetic corpus has no edges")
    total = sum(syn[t] for t in p.support)
    raw = [max(syn[t] / total if total else 0.0, eps) for t in p.support]
    z = sum(raw)
    return kl_divergence(p.probs, [r / z for r in raw], base)


def invocation_counts(graphs: Iterable[CallGraph]) -> Counter:
    """How often each microservice is invoked, i.e. appears as an edge destination."""
    return Counter(e.destination for g in graphs for e in g.edges)


def top_k_services(graphs: Iterable[CallGraph], k: int) -> list[str]:
    counts = invocation_counts(graphs)
    if len(counts) < k:
        raise InsufficientSupport(f"{len(counts)} distinct microservices, need {k}")
    return _top(counts, k)


def heavy_hitter_similarity(real: Sequence[CallGraph], synthetic: Sequence[CallGraph], k: int) -> float:
    """Overlap of the two corpora's top-``k`` most invoked microservices, as a fraction of ``k``."""
    if k < 1:
        raise ValueError("k must be positive")
    return len(set(top_k_services(real, k)) & set(top_k_services(synthetic, k))) / k


@dataclass(frozen=True)
class RepeatedMeasure:
    mean: float
    stderr: float
    values: tuple[float, ...]

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean, "stderr": self.stderr, "values": list(self.values)}


def repeated(values: Sequence[float]) -> RepeatedMeasure:
    mean = statistics.fmean(values)
    stderr = statistics.stdev(values) / math.sqrt(len(values)) if len(values) > 1 else 0.0
    return RepeatedMeasure(mean, stderr, tuple(values))


def heavy_hitter_runs(
    real: Sequence[CallGraph],
    synthesize: Callable[[int], Sequence[CallGraph]],
    k: int,
    runs: int = 20,
    seed: int = 0,
) -> RepeatedMeasure:
    """Mean and standard error of heavy-hitter similarity over ``runs`` synthetic sets.

    ``synthesize(run_seed)`` must return a fresh synthetic corpus; run seeds
    are ``seed, seed + 1, ...``.
    """
    return repeated([heavy_hitter_similarity(real, synthesize(seed + r), k) for r in range(runs)])


def emd_1d(a: Sequence[float], b: Sequence[float]) -> float:
    """Area between the empirical CDFs of ``a`` and ``b``."""
    if not a or not b:
        raise EmptySamples("both sample sets must be non-empty")
    xs = sorted(a)
    ys = sorted(b)
    points = sorted(set(xs) | set(ys))
    na, nb = len(xs), len(ys)
    i = j = 0
    area = 0.0
    for lo, hi in zip(points, points[1:]):
        while i < na and xs[i] <= lo:
            i += 1
        while j < nb and ys[j] <= lo:
            j += 1
        area += abs(i / na - j / nb) * (hi - lo)
    return area


def emd_normalized(a: Sequence[float], b: Sequence[float]) -> float:
    """1-D EMD divided by the pooled sample range; 0 when every sample is equal."""
    if not a or not b:
        raise EmptySamples("both sample sets must be non-empty")
    lo = min(min(a), min(b))
    hi = max(max(a), max(b))
    if hi == lo:
        return 0.0
    return min(1.0, emd_1d(a, b) / (hi - lo))


def degree_distributions(graphs: Sequence[CallGraph]) -> tuple[list[int], list[int]]:
    """Per-microservice in-degree and out-degree totals across the corpus.

    The client is not a microservice and is left out of both.
    """
    if not graphs:
        raise EmptyCorpus("no graphs")
    indeg: Counter = Counter()
    outdeg: Counter = Counter()
    for g in graphs:
        for e in g.edges:
            if e.destination != CLIENT:
                indeg[e.destination] += 1
            if e.source != CLIENT:
                outdeg[e.source] += 1
    return [indeg[k] for k in sorted(indeg)], [outdeg[k] for k in sorted(outdeg)]


def response_time_samples(graphs: Iterable[CallGraph]) -> list[int]:
    return [e.finish_ms - e.start_ms for g in graphs for e in g.edges]


def memorization_rate(synthetic: Sequence[CallGraph], training_hashes: set[str] | frozenset[str]) -> float:
    if not synthetic:
        return 0.0
    return sum(canonical_hash(g) in training_hashes for g in synthetic) / len(synthetic)


def evaluate(
    real: Sequence[CallGraph],
    synthetic: Sequence[CallGraph],
    top_n: int = 100,
    ks: Sequence[int] = (5, 10, 20),
    eps: float = 1e-6,
    training_hashes: set[str] | None = None,
    log_base: float = math.e,
) -> dict[str, Any]:
    """Every corpus-level metric in one report."""
    real_in, real_out = degree_distributions(real)
    syn_in, syn_out = degree_distributions(synthetic)
    heavy: dict[str, float | None] = {}
    for k in ks:
        try:
            heavy[str(k)] = heavy_hitter_similarity(real, synthetic, k)
        except InsufficientSupport:
            heavy[str(k)] = None
    if training_hashes is None:
        training_hashes = {canonical_hash(g) for g in real}
    return {
        "kl_popular_calls": kl_popular_calls(real, synthetic, top_n, eps, log_base),
        "heavy_hitter_similarity": heavy,
        "emd_in_degree": emd_normalized(real_in, syn_in) if real_in and syn_in else None,
        "emd_out_degree": emd_normalized(real_out, syn_out) if real_out and syn_out else None,
        "emd_response_time": emd_normalized(response_time_samples(real), response_time_samples(synthetic)),
        "memorization_rate": memorization_rate(synthetic, training_hashes),
        "real_graphs": len(real),
        "synthetic_graphs": len(synthetic),
    }


def format_report(report: Mapping[str, Any]) -> str:
    """Aligned two-column text rendering of :func:`evaluate` output."""
    rows = []
    for key, value in report.items():
        if isinstance(value, Mapping):
            for sub, v in value.items():
                rows.append((f"{key}@{sub}", v))
        else:
            rows.append((key, value))
    width = max(len(k) for k, _ in rows)
    lines = []
    for k, v in rows:
        shown = "n/a" if v is None else (f"{v:.6f}" if isinstance(v, float) else str(v))
        lines.append(f"{k.ljust(width)}  {shown}")
    return "\n".join(lines) + "\n"


# -- accuracy grid ------------------------------------------------------------------


def grid_prompt(num_edges: int, depth: int, service_id: str | None = None) -> LayerConditions:
    return LayerConditions(
        start_node=CLIENT,
        caller=ROOT_CALLER,
        remaining_depth=depth,
        num_edges=num_edges,
        start_edge_id=0,
        latency_ms=None,
        start_communication_at_ms=0,
        service_id=service_id,
    )


@dataclass
class AccuracyGrid:
    cells: dict[tuple[int, int], float]
    samples_per_cell: int
    annotations: dict[tuple[int, int], dict[str, int]] = field(default_factory=dict)
    seed: int = 0

    @property
    def edges_range(self) -> list[int]:
        return sorted({n for n, _ in self.cells})

    @property
    def depth_range(self) -> list[int]:
        return sorted({d for _, d in self.cells})

    def to_dict(self) -> dict[str, Any]:
        return {
            "samples_per_cell": self.samples_per_cell,
            "seed": self.seed,
            "cells": [
                {"num_edges": n, "depth": d, "accuracy": acc, "outcomes": self.annotations.get((n, d), {})}
                for (n, d), acc in sorted(self.cells.items())
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        """Heatmap matrix: one row per depth, one column per edge count."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["depth\\num_edges", *self.edges_range])
        for d in self.depth_range:
            w.writerow([d, *(f"{self.cells[(n, d)]:.4f}" for n in self.edges_range)])
        return buf.getvalue()


def _run_cell(
    backend: Backend, n: int, d: int, samples: int, params: CompletionParams, limits: Limits, service_id: str | None
) -> tuple[float, dict[str, int]]:
    outcomes: Counter = Counter()
    valid = 0
    for i in range(samples):
        cell_params = replace(params, seed=params.seed * 1_000_003 + (n * 100 + d) * 10_007 + i)
        try:
            recursive_generate(backend, grid_prompt(n, d, service_id), cell_params, limits)
        except GenerationFailed as exc:
            outcomes[exc.reason.value] += 1
        except BackendError as exc:
            outcomes[type(exc).__name__] += 1
        else:
            outcomes["DONE"] += 1
            valid += 1
    return valid / samples, dict(sorted(outcomes.items()))


def accuracy_grid(
    backend: Backend,
    edges_range: Iterable[int],
    depth_range: Iterable[int],
    samples_per_cell: int = 50,
    params: CompletionParams | None = None,
    limits: Limits | None = None,
    jobs: int = 1,
    service_id: str | None = None,
) -> AccuracyGrid:
    """Fraction of sessions per (num_edges, depth) cell that pass :func:`validate_generation`.

    Retries are off unless ``limits`` says otherwise. Backend errors count as
    failures and are tallied in the cell's annotations.
    """
    params = params or CompletionParams()
    limits = limits or Limits(max_retries=0)
    cells = [(n, d) for n in edges_range for d in depth_range]
    if not cells or samples_per_cell < 1:
        raise ValueError("grid ranges must be non-empty and samples_per_cell positive")
    workers = jobs if getattr(backend, "concurrent", False) else 1

    def run(cell):
        return _run_cell(backend, cell[0], cell[1], samples_per_cell, params, limits, service_id)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, cells))
    else:
        results = [run(c) for c in cells]
    grid = AccuracyGrid({}, samples_per_cell, seed=params.seed)
    for cell, (acc, notes) in zip(cells, results):
        grid.cells[cell] = acc
        grid.annotations[cell] = notes
    return grid
