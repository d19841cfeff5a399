"""Call-graph domain types and the structural algorithms over them.

A call graph is a tree of RPC edges addressed by dot-decimal ids ("0", "0.1",
"0.1.2"). The root edge carries the user request (source ``Client``); every
other edge hangs under the edge whose id is its own id minus the last
component.

Layers group the children of one edge. ``decompose_layers`` turns a graph into
the pre-order sequence of (conditions, edges, child conditions) triples that
the recursive text format and the generation driver work with, and
``assemble_layers`` folds such a sequence back into a graph.
"""

from __future__ import annotations

import hashlib
import json
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, replace
from typing import Any, NamedTuple

CLIENT = "Client"
# caller of the root layer; the request has no upstream microservice
ROOT_CALLER = "None"

EdgePath = tuple[int, ...]


def parse_edge_id(value: str | Sequence[int]) -> EdgePath:
    """Parse a dot-decimal id such as ``"0.1.2"`` into ``(0, 1, 2)``."""
    if not isinstance(value, str):
        path = tuple(int(v) for v in value)
    else:
        parts = value.strip().split(".")
        if not all(p.isdigit() for p in parts):
            raise MalformedEdgeId(f"not a dot-decimal edge id: {value!r}")
        path = tuple(int(p) for p in parts)
    if not path or any(p < 0 for p in path):
        raise MalformedEdgeId(f"not a dot-decimal edge id: {value!r}")
    return path


def format_edge_id(path: EdgePath) -> str:
    return ".".join(str(p) for p in path)


@dataclass(frozen=True)
class Edge:
    """One RPC communication between two microservices."""

    edge_id: EdgePath
    source: str
    destination: str
    comm_type: str
    start_ms: int
    finish_ms: int

    @property
    def dotted_id(self) -> str:
        return format_edge_id(self.edge_id)

    @property
    def parent_id(self) -> EdgePath | None:
        return self.edge_id[:-1] or None

    @property
    def duration_ms(self) -> int:
        return self.finish_ms - self.start_ms

    @property
    def triple(self) -> tuple[str, str, str]:
        return (self.source, self.destination, self.comm_type)

    def to_dict(self) -> dict[str, Any]:
        return {
            "edge_id": self.dotted_id,
            "source": self.source,
            "destination": self.destination,
            "comm_type": self.comm_type,
            "start_ms": self.start_ms,
            "finish_ms": self.finish_ms,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> Edge:
        return cls(
            edge_id=parse_edge_id(data["edge_id"]),
            source=data["source"],
            destination=data["destination"],
            comm_type=data["comm_type"],
            start_ms=int(data["start_ms"]),
            finish_ms=int(data["finish_ms"]),
        )


@dataclass(frozen=True)
class CallGraph:
    """All edges triggered by one user request.

    Instances are plain values; use :func:`build_graph` to get one whose
    invariants have been checked.
    """

    trace_id: str
    service_id: str
    edges: tuple[Edge, ...]

    @property
    def root(self) -> Edge:
        roots = [e for e in self.edges if len(e.edge_id) == 1]
        if len(roots) != 1:
            raise MultipleRoots(f"graph {self.trace_id!r} has {len(roots)} root edges")
        return roots[0]

    def children(self) -> dict[EdgePath, list[Edge]]:
        kids: dict[EdgePath, list[Edge]] = defaultdict(list)
        for e in self.edges:
            if len(e.edge_id) > 1:
                kids[e.edge_id[:-1]].append(e)
        return kids

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_id": self.trace_id,
            "service_id": self.service_id,
            "edges": [e.to_dict() for e in self.edges],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CallGraph:
        return cls(
            trace_id=str(data["trace_id"]),
            service_id=data["service_id"],
            edges=tuple(Edge.from_dict(e) for e in data["edges"]),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))


@dataclass(frozen=True)
class GraphAttributes:
    service_id: str
    num_edges: int
    depth: int
    latency_ms: int


@dataclass(frozen=True)
class LayerConditions:
    """Prompt for one layer.

    ``remaining_depth`` counts the layers left along the longest chain,
    including this one, so a leaf layer has ``remaining_depth == 1``.
    ``latency_ms`` is the absolute time by which every edge of the layer must
    finish and ``start_communication_at_ms`` the earliest allowed start.

    Only the graph-level prompt may leave ``remaining_depth``, ``num_edges``,
    ``latency_ms`` or ``service_id`` unset. ``parent_edge_id`` is the flat id
    of the edge this layer extends (unset for the root layer, whose caller is
    :data:`ROOT_CALLER`).
    """

    start_node: str
    caller: str
    remaining_depth: int | None
    num_edges: int | None
    start_edge_id: int
    latency_ms: int | None
    start_communication_at_ms: int
    service_id: str | None = None
    parent_edge_id: int | None = None

    @property
    def is_root(self) -> bool:
        return self.caller == ROOT_CALLER

    def feasible(self) -> bool:
        """Whether some single-rooted graph can satisfy these conditions."""
        d, n = self.remaining_depth, self.num_edges
        if d is not None and d < 1:
            return False
        if n is not None and n < 1:
            return False
        if d is not None and n is not None:
            if n < d:
                return False
            # the root layer holds exactly one edge, so depth 1 means one edge
            if self.is_root and d == 1 and n != 1:
                return False
        return True

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class LayerEdge:
    """An edge inside a layer: the source is implied by the layer's start node."""

    flat_edge_id: int
    destination: str
    comm_type: str
    start_ms: int
    finish_ms: int


class Layer(NamedTuple):
    conditions: LayerConditions
    edges: tuple[LayerEdge, ...]
    children: tuple[LayerConditions, ...]


@dataclass(frozen=True)
class Violation:
    """A broken constraint, identified by a stable code string."""

    code: str
    detail: str = ""
    location: int | None = None

    def to_dict(self) -> dict[str, Any]:
        return {"code": self.code, "detail": self.detail, "location": self.location}


STRUCTURE_CODES = ("G_ROOT", "G_PARENT_LINK", "G_SOURCE_MATCH", "G_TIME_NEST", "G_EDGE_TIME", "G_DUP_ID")


class GraphError(ValueError):
    code: str | None = None

    def __init__(self, message: str, violations: Sequence[Violation] = ()) -> None:
        super().__init__(message)
        self.violations = list(violations)


class MissingField(GraphError):
    pass


class MalformedEdgeId(GraphError):
    pass


class Disconnected(GraphError):
    code = "G_PARENT_LINK"


class DuplicateEdgeId(GraphError):
    code = "G_DUP_ID"


class MultipleRoots(GraphError):
    code = "G_ROOT"


class SourceMismatch(GraphError):
    code = "G_SOURCE_MATCH"


class InvalidEdgeTime(GraphError):
    code = "G_EDGE_TIME"


class TimeNestingViolation(GraphError):
    code = "G_TIME_NEST"


_ERROR_BY_CODE: dict[str, type[GraphError]] = {
    cls.code: cls
    for cls in (DuplicateEdgeId, MultipleRoots, Disconnected, SourceMismatch, InvalidEdgeTime, TimeNestingViolation)
    if cls.code is not None
}

_EDGE_FIELDS = ("edge_id", "source", "destination", "comm_type", "start_ms", "finish_ms")


def _missing(value: Any) -> bool:
    return value is None or (isinstance(value, str) and not value.strip())


def build_graph(
    records: Iterable[Mapping[str, Any] | Edge],
    trace_id: str | None = None,
    service_id: str | None = None,
) -> CallGraph:
    """Assemble and validate a graph from edge records of a single trace.

    Records are mappings with the keys of :meth:`Edge.to_dict` (optionally
    ``trace_id`` and ``service_id``) or :class:`Edge` instances. Raises a
    :class:`GraphError` subclass naming the first broken invariant.
    """
    edges: list[Edge] = []
    trace_ids: set[str] = set()
    services: list[str] = []
    for rec in records:
        if isinstance(rec, Edge):
            edges.append(rec)
            continue
        absent = [name for name in _EDGE_FIELDS if _missing(rec.get(name))]
        if absent:
            raise MissingField(f"edge record lacks {', '.join(absent)}: {dict(rec)!r}")
        if not _missing(rec.get("trace_id")):
            trace_ids.add(str(rec["trace_id"]))
        if not _missing(rec.get("service_id")):
            services.append(str(rec["service_id"]))
        edges.append(Edge.from_dict(rec))

    if len(trace_ids) > 1:
        raise ValueError(f"records span several traces: {sorted(trace_ids)}")
    if trace_id is None:
        trace_id = trace_ids.pop() if trace_ids else ""
    if not edges:
        raise MultipleRoots(f"trace {trace_id!r} has no edges", [Violation("G_ROOT", "no root edge")])

    edges.sort(key=lambda e: e.edge_id)
    if service_id is None:
        service_id = services[0] if services else ""
    graph = CallGraph(trace_id=trace_id, service_id=service_id, edges=tuple(edges))

    report = check_structure(graph)
    if report:
        first = report[0]
        raise _ERROR_BY_CODE[first.code](f"trace {trace_id!r}: {first.detail}", report)
    return graph


def check_structure(g: CallGraph) -> list[Violation]:
    """Every violation of the call-graph invariants; empty iff ``g`` is valid."""
    report: list[Violation] = []
    by_id: dict[EdgePath, Edge] = {}
    for i, e in enumerate(g.edges):
        if e.edge_id in by_id:
            report.append(Violation("G_DUP_ID", f"edge id {e.dotted_id} appears twice", i))
        else:
            by_id[e.edge_id] = e

    roots = sum(1 for e in by_id.values() if len(e.edge_id) == 1)
    if roots != 1:
        report.append(Violation("G_ROOT", f"expected exactly one root edge, found {roots}"))

    for i, e in enumerate(g.edges):
        if e.start_ms < 0 or e.finish_ms < 0 or e.start_ms > e.finish_ms:
            report.append(Violation("G_EDGE_TIME", f"edge {e.dotted_id} runs {e.start_ms}..{e.finish_ms} ms", i))
        if len(e.edge_id) < 2:
            continue
        parent = by_id.get(e.edge_id[:-1])
        if parent is None:
            report.append(Violation("G_PARENT_LINK", f"parent of edge {e.dotted_id} is absent", i))
            continue
        if e.source != parent.destination:
            report.append(
                Violation(
                    "G_SOURCE_MATCH",
                    f"edge {e.dotted_id} starts at {e.source}, parent ends at {parent.destination}",
                    i,
                )
            )
        if e.start_ms < parent.start_ms or e.finish_ms > parent.finish_ms:
            report.append(
                Violation(
                    "G_TIME_NEST",
                    f"edge {e.dotted_id} ({e.start_ms}..{e.finish_ms}) is not nested in "
                    f"parent {parent.dotted_id} ({parent.start_ms}..{parent.finish_ms})",
                    i,
                )
            )
    return report


def attributes(g: CallGraph) -> GraphAttributes:
    root = g.root
    return GraphAttributes(
        service_id=g.service_id,
        num_edges=len(g.edges),
        depth=max(len(e.edge_id) for e in g.edges),
        latency_ms=root.finish_ms - root.start_ms,
    )


# -- canonical ordering ------------------------------------------------------


def _sibling_order(g: CallGraph) -> dict[EdgePath | None, list[Edge]]:
    """Children of every edge (``None`` for the root level), canonically sorted.

    Siblings sort by start time, then destination; remaining ties fall back to
    comm type, finish time and the canonical form of the subtree so the order
    never depends on the original id labels.
    """
    kids = g.children()
    keys: dict[EdgePath, tuple] = {}

    def key(e: Edge) -> tuple:
        cached = keys.get(e.edge_id)
        if cached is None:
            below = tuple(sorted(key(c) for c in kids.get(e.edge_id, ())))
            cached = (e.start_ms, e.destination, e.comm_type, e.finish_ms, e.source, below)
            keys[e.edge_id] = cached
        return cached

    order: dict[EdgePath | None, list[Edge]] = {None: sorted((e for e in g.edges if len(e.edge_id) == 1), key=key)}
    for parent, members in kids.items():
        order[parent] = sorted(members, key=key)
    return order


def _canonical_paths(g: CallGraph) -> dict[EdgePath, EdgePath]:
    """Map each original edge id to its canonical id (root ``0``, children ``P.1``, ``P.2``...)."""
    order = _sibling_order(g)
    mapping: dict[EdgePath, EdgePath] = {}
    stack: list[tuple[Edge, EdgePath]] = [(e, (k,)) for k, e in enumerate(order[None])]
    while stack:
        e, path = stack.pop()
        mapping[e.edge_id] = path
        for k, c in enumerate(order.get(e.edge_id, ()), start=1):
            stack.append((c, path + (k,)))
    return mapping


def normalize_graph(g: CallGraph) -> CallGraph:
    """Shift times so the root starts at 0 and relabel ids canonically."""
    paths = _canonical_paths(g)
    offset = g.root.start_ms
    edges = [
        replace(e, edge_id=paths[e.edge_id], start_ms=e.start_ms - offset, finish_ms=e.finish_ms - offset)
        for e in g.edges
    ]
    edges.sort(key=lambda e: e.edge_id)
    return CallGraph(trace_id=g.trace_id, service_id=g.service_id, edges=tuple(edges))


def canonical_hash(g: CallGraph) -> str:
    """Digest of the service id and every edge under canonical relabelling.

    The trace id and the original id labels do not contribute; any change to a
    node, comm type, time or to the tree shape does.
    """
    paths = _canonical_paths(g)
    rows = sorted(
        (paths[e.edge_id], e.source, e.destination, e.comm_type, e.start_ms, e.finish_ms) for e in g.edges
    )
    payload = json.dumps([g.service_id, rows], separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# -- layers ------------------------------------------------------------------


def graph_prompt(g: CallGraph) -> LayerConditions:
    """The graph-level prompt, which is also the first layer's conditions."""
    root = g.root
    return LayerConditions(
        start_node=root.source,
        caller=ROOT_CALLER,
        remaining_depth=attributes(g).depth,
        num_edges=len(g.edges),
        start_edge_id=0,
        latency_ms=root.finish_ms,
        start_communication_at_ms=root.start_ms,
        service_id=g.service_id,
    )


def decompose_layers(g: CallGraph) -> list[Layer]:
    """Split a valid graph into layers in pre-order.

    Flat edge ids are handed out in the same pre-order, so each child block's
    ``start_edge_id`` follows the parent layer and all earlier sibling
    subtrees.
    """
    order = _sibling_order(g)
    height: dict[EdgePath, int] = {}
    size: dict[EdgePath, int] = {}
    for e in sorted(g.edges, key=lambda e: -len(e.edge_id)):
        below = order.get(e.edge_id, ())
        height[e.edge_id] = 1 + max((height[c.edge_id] for c in below), default=0)
        size[e.edge_id] = 1 + sum(size[c.edge_id] for c in below)

    layers: list[Layer] = []
    stack: list[tuple[LayerConditions, list[Edge]]] = [(graph_prompt(g), order[None])]
    while stack:
        conds, members = stack.pop()
        first = conds.start_edge_id
        next_id = first + len(members)
        blocks: list[tuple[LayerConditions, list[Edge]]] = []
        for k, e in enumerate(members):
            below = order.get(e.edge_id)
            if not below:
                continue
            child = LayerConditions(
                start_node=e.destination,
                caller=conds.start_node,
                remaining_depth=height[e.edge_id] - 1,
                num_edges=size[e.edge_id] - 1,
                start_edge_id=next_id,
                latency_ms=e.finish_ms,
                start_communication_at_ms=e.start_ms,
                service_id=conds.service_id,
                parent_edge_id=first + k,
            )
            next_id += size[e.edge_id] - 1
            blocks.append((child, below))
        layer_edges = tuple(
            LayerEdge(first + k, e.destination, e.comm_type, e.start_ms, e.finish_ms) for k, e in enumerate(members)
        )
        layers.append(Layer(conds, layer_edges, tuple(c for c, _ in blocks)))
        stack.extend(reversed(blocks))
    return layers


def layer_to_edges(conds: LayerConditions, edges: Sequence[LayerEdge], parent_path: EdgePath | None) -> list[Edge]:
    """Give a layer's edges their dot-decimal ids: ``(k,)`` at the root, ``P + (k+1,)`` below ``P``."""
    out = []
    for k, le in enumerate(edges):
        path = (k,) if parent_path is None else parent_path + (k + 1,)
        out.append(Edge(path, conds.start_node, le.destination, le.comm_type, le.start_ms, le.finish_ms))
    return out


def assemble_layers(layers: Sequence[Layer | tuple], trace_id: str = "", service_id: str | None = None) -> CallGraph:
    """Fold a pre-order layer sequence back into a graph.

    The first layer is the root layer; every child block is matched to the
    layer whose conditions carry the same ``start_edge_id``. Layers that no
    block reaches are ignored. The result is not validated.
    """
    if not layers:
        raise ValueError("no layers to assemble")
    by_start: dict[int, Layer] = {}
    for layer in layers[1:]:
        layer = Layer(*layer)
        by_start.setdefault(layer.conditions.start_edge_id, layer)
    root = Layer(*layers[0])
    if service_id is None:
        service_id = root.conditions.service_id or ""

    edges: list[Edge] = []
    seen: set[int] = set()
    stack: list[tuple[Layer, EdgePath | None]] = [(root, None)]
    while stack:
        layer, parent_path = stack.pop()
        placed = layer_to_edges(layer.conditions, layer.edges, parent_path)
        edges.extend(placed)
        flat = {le.flat_edge_id: e.edge_id for le, e in zip(layer.edges, placed)}
        for child in layer.children:
            sub = by_start.get(child.start_edge_id)
            if sub is None or child.start_edge_id in seen or child.parent_edge_id not in flat:
                continue
            seen.add(child.start_edge_id)
            stack.append((sub, flat[child.parent_edge_id]))
    edges.sort(key=lambda e: e.edge_id)
    return CallGraph(trace_id=trace_id, service_id=service_id, edges=tuple(edges))

