"""Constraint checks for generated layers and assembled graphs.

Layer codes and the rule each one enforces:

================  ==============================================================
F_FORMAT          text is not a well-formed layer, or a scratchpad line's
                  arithmetic disagrees with the layer it annotates
E_FIELDS          an edge lacks one of its five fields
E_COUNT           flat edge ids are not contiguous from ``start_edge_id``, the
                  layer is empty, or it has more edges than the budget
E_START_LOW       an edge starts before the layer's start time
E_START_ORDER     an edge starts after it finishes
E_FINISH_LATENCY  an edge finishes after the layer's latency bound
S_UNEXPECTED      subgraph blocks where none are allowed (remaining depth or
                  remaining edges exhausted)
S_EDGE_REF        a block extends an edge that is not in this layer, or one
                  already extended
S_DEPTH_LT        a child's remaining depth is not below the current one
S_DEPTH_ONE       no child has remaining depth exactly one less
S_START_NODE      a child's start node is not its parent edge's destination
S_CALLER          a child's caller is not this layer's start node
S_LATENCY         a child's latency exceeds its parent edge's finish time
S_START_TIME      a child's start time is before its parent edge's start
T_EDGE_SUM        layer edges plus child budgets differ from the layer budget
================  ==============================================================

When blocks are unexpected they are reported once with S_UNEXPECTED and
otherwise ignored.
"""

from __future__ import annotations

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Any

from tracegen.codec import ParsedLayer, ParseError, parse_layer_output
from tracegen.graph import CallGraph, GraphAttributes, LayerConditions, LayerEdge, Violation, attributes, check_structure

LAYER_CODES = (
    "F_FORMAT",
    "E_FIELDS",
    "E_COUNT",
    "E_START_LOW",
    "E_START_ORDER",
    "E_FINISH_LATENCY",
    "S_UNEXPECTED",
    "S_EDGE_REF",
    "S_DEPTH_LT",
    "S_DEPTH_ONE",
    "S_START_NODE",
    "S_CALLER",
    "S_LATENCY",
    "S_START_TIME",
    "T_EDGE_SUM",
)

HIGH_LATENCY = "HIGH_LATENCY"
UNCOMMON_COMM = "UNCOMMON_COMM"


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _has_fields(le: LayerEdge) -> bool:
    return (
        _is_int(le.flat_edge_id)
        and isinstance(le.destination, str)
        and bool(le.destination.strip())
        and isinstance(le.comm_type, str)
        and bool(le.comm_type.strip())
        and _is_int(le.start_ms)
        and _is_int(le.finish_ms)
    )


def children_expected(conds: LayerConditions, num_layer_edges: int) -> bool:
    if conds.remaining_depth is not None and conds.remaining_depth <= 1:
        return False
    if conds.num_edges is not None and conds.num_edges - num_layer_edges <= 0:
        return False
    return True


def validate_layer(
    edges: Sequence[LayerEdge],
    children: Sequence[LayerConditions],
    conds: LayerConditions,
    edge_notes: Sequence[tuple[int, int, int]] = (),
    depth_notes: Sequence[int | None] = (),
) -> list[Violation]:
    """All violations of one layer against its conditions (empty when conformant)."""
    out: list[Violation] = []
    m = len(edges)

    complete = []
    for i, le in enumerate(edges):
        if _has_fields(le):
            complete.append(le)
        else:
            out.append(Violation("E_FIELDS", f"edge {i} is missing a field: {le!r}", i))

    ids = [le.flat_edge_id for le in edges]
    expected_ids = list(range(conds.start_edge_id, conds.start_edge_id + m))
    if m == 0:
        out.append(Violation("E_COUNT", "layer has no edges"))
    elif ids != expected_ids:
        out.append(Violation("E_COUNT", f"edge ids {ids} are not {expected_ids}"))
    elif conds.num_edges is not None and m > conds.num_edges:
        out.append(Violation("E_COUNT", f"{m} edges exceed the budget of {conds.num_edges}"))

    for i, le in enumerate(edges):
        if not _has_fields(le):
            continue
        if le.start_ms < conds.start_communication_at_ms:
            out.append(
                Violation("E_START_LOW", f"edge {i} starts at {le.start_ms} < {conds.start_communication_at_ms}", i)
            )
        if le.start_ms > le.finish_ms:
            out.append(Violation("E_START_ORDER", f"edge {i} starts at {le.start_ms} after finishing {le.finish_ms}", i))
        if conds.latency_ms is not None and le.finish_ms > conds.latency_ms:
            out.append(Violation("E_FINISH_LATENCY", f"edge {i} finishes at {le.finish_ms} > {conds.latency_ms}", i))

    counted: Sequence[LayerConditions] = children
    if children and not children_expected(conds, m):
        out.append(
            Violation(
                "S_UNEXPECTED",
                f"{len(children)} subgraph block(s) with remaining depth {conds.remaining_depth} "
                f"and {None if conds.num_edges is None else conds.num_edges - m} edges left",
                0,
            )
        )
        counted = ()
    else:
        by_id = {le.flat_edge_id: le for le in complete}
        extended: set[int] = set()
        rd = conds.remaining_depth
        for j, child in enumerate(children):
            if rd is not None and child.remaining_depth is not None and child.remaining_depth >= rd:
                out.append(Violation("S_DEPTH_LT", f"child {j} remaining depth {child.remaining_depth} >= {rd}", j))
            if child.caller != conds.start_node:
                out.append(Violation("S_CALLER", f"child {j} caller {child.caller} != {conds.start_node}", j))
            parent = by_id.get(child.parent_edge_id) if child.parent_edge_id is not None else None
            if parent is None or child.parent_edge_id in extended:
                out.append(Violation("S_EDGE_REF", f"child {j} extends edge {child.parent_edge_id}", j))
                continue
            extended.add(parent.flat_edge_id)
            if child.start_node != parent.destination:
                out.append(
                    Violation("S_START_NODE", f"child {j} start node {child.start_node} != {parent.destination}", j)
                )
            if child.latency_ms is not None and child.latency_ms > parent.finish_ms:
                out.append(Violation("S_LATENCY", f"child {j} latency {child.latency_ms} > {parent.finish_ms}", j))
            if child.start_communication_at_ms < parent.start_ms:
                out.append(
                    Violation(
                        "S_START_TIME", f"child {j} starts at {child.start_communication_at_ms} < {parent.start_ms}", j
                    )
                )
        if rd is not None and rd >= 2 and children_expected(conds, m):
            if not any(c.remaining_depth == rd - 1 for c in children):
                out.append(Violation("S_DEPTH_ONE", f"no child has remaining depth {rd - 1}"))

    if conds.num_edges is not None:
        total = m + sum(c.num_edges or 0 for c in counted)
        if total != conds.num_edges:
            out.append(Violation("T_EDGE_SUM", f"{m} edges + child budgets = {total} != {conds.num_edges}"))

    for j, i, n in edge_notes:
        first = edges[0].flat_edge_id if edges else None
        last = edges[-1].flat_edge_id if edges else None
        if j - i + 1 != n or (j, i, n) != (last, first, m):
            out.append(Violation("F_FORMAT", f"edge-count note '{j} - {i} + 1 = {n}' disagrees with the layer"))
    if len(edge_notes) > 1:
        out.append(Violation("F_FORMAT", "more than one edge-count note"))
    for j, d in enumerate(depth_notes):
        if d is not None and conds.remaining_depth is not None and d != conds.remaining_depth - 1:
            out.append(Violation("F_FORMAT", f"depth note {d} in block {j} != {conds.remaining_depth - 1}", j))
    return out


def validate_layer_text(text: str, conds: LayerConditions) -> tuple[ParsedLayer | None, list[Violation]]:
    """Parse model output for ``conds`` and validate it; unparsable text yields one F_FORMAT."""
    try:
        parsed = parse_layer_output(text, service_id=conds.service_id)
    except ParseError as exc:
        return None, [Violation("F_FORMAT", str(exc))]
    return parsed, validate_layer(parsed.edges, parsed.children, conds, parsed.edge_notes, parsed.depth_notes)


@dataclass(frozen=True)
class AccuracyVerdict:
    valid: bool
    matched_num_edges: bool
    matched_depth: bool
    violations: tuple[Violation, ...] = ()
    matched_latency: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "valid": self.valid,
            "matched_num_edges": self.matched_num_edges,
            "matched_depth": self.matched_depth,
            "matched_latency": self.matched_latency,
            "violations": [v.to_dict() for v in self.violations],
        }


def prompt_attributes(conds: LayerConditions) -> dict[str, int]:
    """The prompted graph attributes carried by a graph-level prompt."""
    out = {}
    if conds.num_edges is not None:
        out["num_edges"] = conds.num_edges
    if conds.remaining_depth is not None:
        out["depth"] = conds.remaining_depth
    if conds.latency_ms is not None:
        out["latency_ms"] = conds.latency_ms - conds.start_communication_at_ms
    return out


def validate_generation(g: CallGraph, prompt: Mapping[str, Any] | GraphAttributes) -> AccuracyVerdict:
    """Accuracy verdict: structurally valid and matching every prompted attribute."""
    if isinstance(prompt, GraphAttributes):
        prompt = {"num_edges": prompt.num_edges, "depth": prompt.depth, "latency_ms": prompt.latency_ms}
    violations = check_structure(g)
    if violations or not g.edges:
        return AccuracyVerdict(False, False, False, tuple(violations))
    attrs = attributes(g)
    want_edges = prompt.get("num_edges")
    want_depth = prompt.get("depth")
    want_latency = prompt.get("latency_ms")
    matched_edges = want_edges is None or attrs.num_edges == want_edges
    matched_depth = want_depth is None or attrs.depth == want_depth
    matched_latency = want_latency is None or attrs.latency_ms == want_latency
    if not matched_edges:
        violations.append(Violation("T_EDGE_SUM", f"graph has {attrs.num_edges} edges, prompt asked {want_edges}"))
    valid = not violations and matched_edges and matched_depth and matched_latency
    return AccuracyVerdict(valid, matched_edges, matched_depth, tuple(violations), matched_latency)


@dataclass(frozen=True)
class Instruction:
    """A special instruction: high latency, or an uncommon (source, destination, type) call."""

    kind: str
    call: tuple[str, str, str] | None = None

    def text(self) -> str:
        if self.kind == HIGH_LATENCY:
            return "Build a call graph with high latency"
        if self.kind == UNCOMMON_COMM and self.call is not None:
            src, dst, typ = self.call
            return f"Include an edge from {src} to {dst} with {typ} communication type"
        raise ValueError(f"unknown instruction {self!r}")


class UnknownService(KeyError):
    pass


def check_instruction_compliance(g: CallGraph, tag: Instruction | Iterable[Instruction], stats: Any) -> bool:
    """Whether ``g`` satisfies the instruction (or every instruction of a combination).

    ``stats`` is the :class:`~tracegen.ingest.CorpusStats` of the corpus the
    instructions were derived from.
    """
    tags = [tag] if isinstance(tag, Instruction) else list(tag)
    ok = True
    for t in tags:
        if t.kind == HIGH_LATENCY:
            p90 = stats.per_service_p90_latency.get(g.service_id)
            if p90 is None:
                raise UnknownService(g.service_id)
            ok = ok and attributes(g).latency_ms >= p90
        elif t.kind == UNCOMMON_COMM:
            ok = ok and any(e.triple == t.call for e in g.edges)
        else:
            raise ValueError(f"unknown instruction kind {t.kind!r}")
    return ok
