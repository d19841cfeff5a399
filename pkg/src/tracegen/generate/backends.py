"""Text-completion backends.

A backend maps a rendered layer prompt to completion text. Three are
provided: a replay oracle that answers from real graphs, a statistical
backend that samples a consistent layer from a fitted model, and an HTTP
client for a remote completion endpoint.
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import threading
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import Protocol

import httpx

from tracegen.codec import ParseError, parse_conditions, render_completion, render_conditions
from tracegen.generate.probabilistic import Categorical, ProbModel, draw_interval
from tracegen.graph import CallGraph, LayerConditions, LayerEdge, decompose_layers

log = logging.getLogger(__name__)

URL_ENV = "TRACEGEN_BACKEND_URL"
TOKEN_ENV = "TRACEGEN_BACKEND_TOKEN"
STOP_SEQUENCES = ("</subgraph>", "</edges>")


@dataclass(frozen=True)
class CompletionParams:
    temperature: float = 0.8
    top_k: int | None = 50
    max_tokens: int = 2048
    seed: int = 0

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be positive or None, got {self.top_k}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be positive, got {self.max_tokens}")


class BackendError(RuntimeError):
    pass


class BackendUnavailable(BackendError):
    pass


class BackendTimeout(BackendError):
    pass


class EmptyCompletion(BackendError):
    pass


class UnparsablePrompt(BackendError):
    pass


class ReplayMiss(BackendError):
    """The replay oracle has no recorded layer for this prompt."""


class Backend(Protocol):
    concurrent: bool

    def complete(self, prompt: str, params: CompletionParams) -> str: ...


def _check_prompt(prompt: str) -> None:
    if not prompt or not prompt.strip():
        raise ValueError("prompt must be non-empty")


# -- replay ----------------------------------------------------------------------


class ReplayBackend:
    """Answers each layer prompt with the recorded layer of a known graph.

    Prompts are keyed by their exact rendering, so the driver must render
    conditions the same way (:func:`~tracegen.codec.render_conditions`).
    """

    concurrent = False

    def __init__(self, table: dict[str, str]) -> None:
        self.table = table

    @classmethod
    def from_graph(
        cls,
        g: CallGraph,
        with_intermediate: bool = False,
        drop: Sequence[str] = (),
    ) -> ReplayBackend:
        return cls.from_graphs([g], with_intermediate, drop)

    @classmethod
    def from_graphs(
        cls,
        graphs: Iterable[CallGraph],
        with_intermediate: bool = False,
        drop: Sequence[str] = (),
    ) -> ReplayBackend:
        """Record every layer of every graph. ``drop`` strips header fields from all prompts.

        A later graph never overrides an earlier graph's answer to the same prompt.
        """
        table: dict[str, str] = {}
        for g in graphs:
            for layer in decompose_layers(g):
                key = render_conditions(layer.conditions, drop)
                table.setdefault(key, render_completion(layer.conditions, layer.edges, layer.children, with_intermediate))
        return cls(table)

    def complete(self, prompt: str, params: CompletionParams) -> str:
        _check_prompt(prompt)
        try:
            return self.table[prompt]
        except KeyError:
            raise ReplayMiss(f"no recorded layer for prompt {prompt!r}") from None


# -- statistical -----------------------------------------------------------------


class _Picker:
    """Categorical choice honouring temperature and top-k; temperature 0 is greedy."""

    def __init__(self, params: CompletionParams, rng: random.Random) -> None:
        self.params = params
        self.rng = rng

    def pick(self, dist: Categorical):
        if self.params.temperature == 0:
            return dist.mode()
        ranked = sorted(zip(dist.probs, range(len(dist))), key=lambda x: (-x[0], x[1]))
        if self.params.top_k is not None:
            ranked = ranked[: self.params.top_k]
        weights = [p ** (1.0 / self.params.temperature) for p, _ in ranked]
        (_, i), = self.rng.choices(ranked, weights=weights)
        return dist.keys[i]

    def integer(self, lo: int, hi: int, prior: Categorical | None = None) -> int:
        """An integer in ``[lo, hi]``, drawn from ``prior`` restricted to the range when it has mass there."""
        if prior is not None:
            narrowed = prior.restricted(lambda k: lo <= k <= hi)
            if narrowed is not None:
                return self.pick(narrowed)
        return lo if self.params.temperature == 0 else self.rng.randint(lo, hi)


class StatisticalTextBackend:
    """Samples a budget-consistent layer from a :class:`ProbModel` and renders it.

    Unset graph-level attributes (depth, edge count, latency) are drawn from
    the model first. The root layer is always a single call spanning the
    whole latency window. Below it, a layer with remaining depth ``R`` and
    budget ``N`` takes between 1 and ``N - R + 1`` edges (all ``N`` when
    ``R == 1``) and passes the rest down: one child keeps depth ``R - 1`` so
    the prompted depth is met exactly, every other child gets at most that.
    """

    concurrent = True

    def __init__(self, model: ProbModel, with_intermediate: bool = True) -> None:
        self.model = model
        self.with_intermediate = with_intermediate
        positive = {k: p for k, p in model.child_counts(1).as_dict().items() if k > 0}
        pooled: dict[int, float] = {}
        for dist in model.child_count_dist.values():
            for k, p in dist.as_dict().items():
                if k > 0:
                    pooled[k] = pooled.get(k, 0.0) + p
        self._fanout = Categorical(pooled) if pooled else Categorical(positive or {1: 1.0})

    def _fill(self, conds: LayerConditions, pick: _Picker) -> LayerConditions:
        d, n, lat = conds.remaining_depth, conds.num_edges, conds.latency_ms
        if n is None and d is None:
            n = pick.pick(self.model.edge_count_dist)
        if d is None:
            feasible = self.model.depth_dist.restricted(lambda k: k <= n and (k >= 2 or n == 1))
            d = pick.pick(feasible) if feasible else (1 if n == 1 else 2)
        if n is None:
            feasible = self.model.edge_count_dist.restricted(lambda k: k >= d and (d >= 2 or k == 1))
            n = pick.pick(feasible) if feasible else d
        if lat is None:
            start = conds.start_communication_at_ms
            lat = start + pick.pick(self.model.durations(self.model.comm_types(1).mode()))
        return LayerConditions(
            conds.start_node,
            conds.caller,
            d,
            n,
            conds.start_edge_id,
            lat,
            conds.start_communication_at_ms,
            conds.service_id,
            conds.parent_edge_id,
        )

    def _edge(self, source: str, level_types: Categorical, lo: int, hi: int, pick: _Picker) -> tuple[str, str, int, int]:
        typ = pick.pick(level_types)
        dst = pick.pick(self.model.destinations(source, typ))
        start, finish = draw_interval(self.model, typ, lo, hi, pick.rng)
        return dst, typ, start, finish

    def sample_layer(
        self, conds: LayerConditions, pick: _Picker
    ) -> tuple[LayerConditions, list[LayerEdge], list[LayerConditions]]:
        conds = self._fill(conds, pick)
        if not conds.feasible():
            raise UnparsablePrompt(
                f"no graph has {conds.num_edges} edges and depth {conds.remaining_depth} under one root"
            )
        if conds.latency_ms < conds.start_communication_at_ms:
            raise UnparsablePrompt(f"latency {conds.latency_ms} precedes start {conds.start_communication_at_ms}")
        R, N = conds.remaining_depth, conds.num_edges
        lo, hi = conds.start_communication_at_ms, conds.latency_ms
        first = conds.start_edge_id

        if conds.is_root:
            typ = pick.pick(self.model.comm_types(1))
            dst = pick.pick(self.model.destinations(conds.start_node, typ))
            edges = [LayerEdge(first, dst, typ, lo, hi)]
        else:
            m = N if R == 1 else pick.integer(1, N - R + 1, self._fanout)
            level_types = self.model.comm_type_dist
            edges = []
            for k in range(m):
                dst, typ, s, f = self._edge(conds.start_node, level_types, lo, hi, pick)
                edges.append(LayerEdge(first + k, dst, typ, s, f))
            edges.sort(key=lambda le: (le.start_ms, le.finish_ms, le.destination, le.comm_type))
            edges = [LayerEdge(first + k, le.destination, le.comm_type, le.start_ms, le.finish_ms) for k, le in enumerate(edges)]

        m = len(edges)
        budget = N - m
        if R == 1 or budget == 0:
            return conds, edges, []

        # at least one unit per extended edge and R - 1 for the deep one
        k = pick.integer(1, min(m, budget - R + 2))
        extended = sorted(pick.rng.sample(range(m), k)) if pick.params.temperature else list(range(k))
        deep = extended[0] if pick.params.temperature == 0 else pick.rng.choice(extended)
        budgets = {i: (R - 1 if i == deep else 1) for i in extended}
        for _ in range(budget - sum(budgets.values())):
            budgets[pick.rng.choice(extended) if pick.params.temperature else deep] += 1
        children = []
        next_id = first + m
        for i in extended:
            b = budgets[i]
            rd = R - 1 if i == deep else pick.integer(1, min(R - 1, b))
            le = edges[i]
            children.append(
                LayerConditions(
                    start_node=le.destination,
                    caller=conds.start_node,
                    remaining_depth=rd,
                    num_edges=b,
                    start_edge_id=next_id,
                    latency_ms=le.finish_ms,
                    start_communication_at_ms=le.start_ms,
                    service_id=conds.service_id,
                    parent_edge_id=le.flat_edge_id,
                )
            )
            next_id += b
        return conds, edges, children

    def complete(self, prompt: str, params: CompletionParams) -> str:
        _check_prompt(prompt)
        try:
            conds = parse_conditions(prompt)
        except ParseError as exc:
            raise UnparsablePrompt(str(exc)) from exc
        digest = hashlib.sha256(prompt.encode()).hexdigest()
        pick = _Picker(params, random.Random(f"{params.seed}:{digest}"))
        conds, edges, children = self.sample_layer(conds, pick)
        return render_completion(conds, edges, children, self.with_intermediate)


# -- http ------------------------------------------------------------------------


class HttpBackend:
    """Client for a remote completion endpoint.

    POSTs ``{prompt, temperature, top_k, max_tokens, seed, stop}`` and expects
    ``{"text": ...}`` back. Transport errors and 5xx responses are retried
    with exponential backoff; a semaphore caps requests in flight.
    """

    concurrent = True

    def __init__(
        self,
        url: str | None = None,
        token: str | None = None,
        timeout: float = 60.0,
        retries: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 8,
        prompt_template: str = "{prompt}",
        client: httpx.Client | None = None,
    ) -> None:
        self.url = url or os.environ.get(URL_ENV)
        if not self.url:
            raise BackendUnavailable(f"no endpoint configured; pass a URL or set {URL_ENV}")
        token = token or os.environ.get(TOKEN_ENV)
        headers = {"Authorization": f"Bearer {token}"} if token else {}
        self.client = client or httpx.Client(timeout=timeout, headers=headers)
        self.retries = retries
        self.backoff = backoff
        self.prompt_template = prompt_template
        self._slots = threading.BoundedSemaphore(max_in_flight)

    def close(self) -> None:
        self.client.close()

    def payload(self, prompt: str, params: CompletionParams) -> dict:
        return {
            "prompt": self.prompt_template.format(prompt=prompt),
            "temperature": params.temperature,
            "top_k": params.top_k,
            "max_tokens": params.max_tokens,
            "seed": params.seed,
            "stop": list(STOP_SEQUENCES),
        }

    def complete(self, prompt: str, params: CompletionParams) -> str:
        _check_prompt(prompt)
        body = self.payload(prompt, params)
        last: Exception | None = None
        for attempt in range(self.retries + 1):
            if attempt:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self.client.post(self.url, json=body)
            except httpx.TimeoutException as exc:
                last = BackendTimeout(f"{self.url}: {exc}")
                continue
            except httpx.TransportError as exc:
                last = BackendUnavailable(f"{self.url}: {exc}")
                continue
            if resp.status_code >= 500:
                last = BackendUnavailable(f"{self.url}: HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise BackendError(f"{self.url}: HTTP {resp.status_code}: {resp.text[:200]}")
            try:
                text = resp.json()["text"]
            except (ValueError, KeyError, TypeError) as exc:
                raise BackendError(f"{self.url}: response lacks a text field") from exc
            if not isinstance(text, str) or not text.strip():
                raise EmptyCompletion(f"{self.url}: empty completion")
            return text
        log.warning("giving up on %s after %d attempts", self.url, self.retries + 1)
        assert last is not None
        raise last
