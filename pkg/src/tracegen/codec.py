"""Text formats for call graphs.

Normative grammar (format version 1)::

    header      := ("name: value" NL)*
    edges       := "<edges>" NL (edge-line NL | edge-note NL)* "</edges>" NL
    subgraph    := "<subgraph>" NL (depth-note NL)? ("name: value" NL)+ "</subgraph>" NL
    layer       := header edges subgraph*
    tabular     := header edges

Edge lines are comma-separated clauses in any order, e.g.
``Edge ID is 0, Source is Client, Destination is Front end, Type is HTTP,
Communication starts at 0 ms, Communication finishes at 24 ms``. Tabular
lines carry all six clauses with a dot-decimal edge id; layer lines drop the
source and carry an integer (flat) edge id. Header values are bare integers
or names; only edge clauses use the ``ms`` suffix.

The two scratchpad lines (edge count note at the end of ``<edges>``, depth
note at the start of ``<subgraph>``) are recognised and kept apart from the
structure so the validator can check their arithmetic.
"""

from __future__ import annotations

import random
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from enum import Enum

from tracegen.graph import (
    CallGraph,
    Edge,
    Layer,
    LayerConditions,
    LayerEdge,
    MalformedEdgeId,
    Violation,
    attributes,
    canonical_hash,
    check_structure,
    parse_edge_id,
)

FORMAT_VERSION = "1"


class SampleFormat(str, Enum):
    TABULAR = "TABULAR"
    RECURSIVE_LAYER = "RECURSIVE_LAYER"


@dataclass(frozen=True)
class TextSample:
    text: str
    format: SampleFormat
    origin_hash: str | None = None

    def to_dict(self) -> dict:
        return {"text": self.text, "format": self.format.value, "origin_hash": self.origin_hash}


class ParseError(ValueError):
    """Text that does not follow the grammar.

    ``kind`` is one of MISSING_EDGES_BLOCK, DUPLICATE_EDGES_BLOCK,
    UNCLOSED_BLOCK, STRAY_TEXT, BAD_EDGE_LINE, BAD_SUBGRAPH_FIELD,
    BAD_HEADER_FIELD.
    """

    def __init__(self, kind: str, detail: str = "", line: str | None = None, name: str | None = None) -> None:
        super().__init__(f"{kind}: {detail}" if detail else kind)
        self.kind = kind
        self.line = line
        self.name = name


class StructuralViolation(ValueError):
    def __init__(self, violations: Sequence[Violation]) -> None:
        super().__init__("; ".join(v.code for v in violations))
        self.violations = list(violations)

    @property
    def codes(self) -> set[str]:
        return {v.code for v in self.violations}


# -- edge clauses -------------------------------------------------------------

EDGE_FEATURES = ("edge_id", "source", "destination", "comm_type", "start_ms", "finish_ms")
LAYER_EDGE_FEATURES = ("edge_id", "destination", "comm_type", "start_ms", "finish_ms")

_CLAUSE_PREFIX = {
    "edge_id": "Edge ID is ",
    "source": "Source is ",
    "destination": "Destination is ",
    "comm_type": "Type is ",
    "start_ms": "Communication starts at ",
    "finish_ms": "Communication finishes at ",
}
_TIMED = ("start_ms", "finish_ms")
_INT = re.compile(r"-?\d+")


def _clause(feature: str, value: object) -> str:
    text = str(value)
    if ", " in text or "\n" in text:
        raise ValueError(f"{feature} value {text!r} cannot be encoded")
    if feature in _TIMED:
        return f"{_CLAUSE_PREFIX[feature]}{text} ms"
    return f"{_CLAUSE_PREFIX[feature]}{text}"


def _edge_values(e: Edge) -> dict[str, object]:
    return {
        "edge_id": e.dotted_id,
        "source": e.source,
        "destination": e.destination,
        "comm_type": e.comm_type,
        "start_ms": e.start_ms,
        "finish_ms": e.finish_ms,
    }


def encode_edge_nl(e: Edge, order: Sequence[str] = EDGE_FEATURES) -> str:
    """Render an edge as natural-language clauses in the given feature order."""
    if sorted(order) != sorted(EDGE_FEATURES):
        raise ValueError(f"order must be a permutation of {EDGE_FEATURES}")
    values = _edge_values(e)
    return ", ".join(_clause(f, values[f]) for f in order)


def encode_layer_edge(le: LayerEdge, order: Sequence[str] = LAYER_EDGE_FEATURES) -> str:
    values = {
        "edge_id": le.flat_edge_id,
        "destination": le.destination,
        "comm_type": le.comm_type,
        "start_ms": le.start_ms,
        "finish_ms": le.finish_ms,
    }
    return ", ".join(_clause(f, values[f]) for f in order)


def _parse_clauses(line: str, expected: Sequence[str]) -> dict[str, str]:
    found: dict[str, str] = {}
    for clause in line.strip().split(", "):
        for feature, prefix in _CLAUSE_PREFIX.items():
            if clause.startswith(prefix):
                value = clause[len(prefix) :]
                if feature in _TIMED:
                    if not value.endswith(" ms"):
                        raise ParseError("BAD_EDGE_LINE", f"time without ms suffix in {clause!r}", line=line)
                    value = value[:-3]
                    if not _INT.fullmatch(value):
                        raise ParseError("BAD_EDGE_LINE", f"non-integer time in {clause!r}", line=line)
                break
        else:
            raise ParseError("BAD_EDGE_LINE", f"unknown clause {clause!r}", line=line)
        if feature in found:
            raise ParseError("BAD_EDGE_LINE", f"clause {feature} repeated", line=line)
        if feature not in expected or not value:
            raise ParseError("BAD_EDGE_LINE", f"unexpected clause {clause!r}", line=line)
        found[feature] = value
    if len(found) != len(expected):
        missing = [f for f in expected if f not in found]
        raise ParseError("BAD_EDGE_LINE", f"expected {len(expected)} fields, missing {missing}", line=line)
    return found


def parse_edge_nl(line: str) -> Edge:
    """Inverse of :func:`encode_edge_nl`, for any clause order."""
    v = _parse_clauses(line, EDGE_FEATURES)
    try:
        path = parse_edge_id(v["edge_id"])
    except MalformedEdgeId as exc:
        raise ParseError("BAD_EDGE_LINE", str(exc), line=line) from None
    return Edge(path, v["source"], v["destination"], v["comm_type"], int(v["start_ms"]), int(v["finish_ms"]))


def parse_layer_edge(line: str) -> LayerEdge:
    v = _parse_clauses(line, LAYER_EDGE_FEATURES)
    if not v["edge_id"].isdigit():
        raise ParseError("BAD_EDGE_LINE", f"layer edge id must be an integer, got {v['edge_id']!r}", line=line)
    return LayerEdge(int(v["edge_id"]), v["destination"], v["comm_type"], int(v["start_ms"]), int(v["finish_ms"]))


# -- headers ------------------------------------------------------------------

# header name -> LayerConditions attribute
CONDITION_FIELDS = {
    "service_id": "service_id",
    "start_node": "start_node",
    "caller": "caller",
    "remaining_depth": "remaining_depth",
    "num_edges": "num_edges",
    "start_edge_id": "start_edge_id",
    "latency": "latency_ms",
    "start_communication_at": "start_communication_at_ms",
}
_NAME_FIELDS = {"service_id", "start_node", "caller"}
# the graph-level prompt may omit these (attribute dropping, partial prompts)
OPTIONAL_CONDITIONS = ("service_id", "remaining_depth", "num_edges", "latency")
SUBGRAPH_FIELDS = ("edge_id",) + tuple(k for k in CONDITION_FIELDS if k != "service_id")

TABULAR_ATTRIBUTES = ("service_id", "num_edges", "depth", "latency")


def _kv(line: str, kind: str) -> tuple[str, str]:
    name, sep, value = line.partition(": ")
    if not sep or not name or not value.strip():
        raise ParseError(kind, f"not a 'name: value' line: {line!r}", line=line, name=name or None)
    return name.strip(), value.strip()


def _int_field(name: str, value: str, kind: str) -> int:
    if not _INT.fullmatch(value):
        raise ParseError(kind, f"{name} must be an integer, got {value!r}", name=name)
    return int(value)


def render_conditions(conds: LayerConditions, drop: Sequence[str] = ()) -> str:
    """Header lines for a layer prompt; ``None`` fields and names in ``drop`` are omitted."""
    lines = []
    for name, attr in CONDITION_FIELDS.items():
        value = getattr(conds, attr)
        if value is None or name in drop:
            continue
        lines.append(f"{name}: {value}")
    return "\n".join(lines) + "\n"


render_prompt = render_conditions


def _conditions_from_pairs(pairs: Mapping[str, str], kind: str, required: Sequence[str]) -> LayerConditions:
    for name in pairs:
        if name not in CONDITION_FIELDS and name != "edge_id":
            raise ParseError(kind, f"unknown field {name!r}", name=name)
    for name in required:
        if name not in pairs:
            raise ParseError(kind, f"missing field {name!r}", name=name)
    values: dict[str, object] = {}
    for name, attr in CONDITION_FIELDS.items():
        if name not in pairs:
            values[attr] = None
        elif name in _NAME_FIELDS:
            values[attr] = pairs[name]
        else:
            values[attr] = _int_field(name, pairs[name], kind)
    if "edge_id" in pairs:
        values["parent_edge_id"] = _int_field("edge_id", pairs["edge_id"], kind)
    return LayerConditions(**values)  # type: ignore[arg-type]


def parse_conditions(text: str) -> LayerConditions:
    """Parse a rendered layer header (as produced by :func:`render_conditions`)."""
    pairs: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        name, value = _kv(line, "BAD_HEADER_FIELD")
        if name in pairs:
            raise ParseError("BAD_HEADER_FIELD", f"field {name!r} repeated", name=name)
        pairs[name] = value
    required = [n for n in CONDITION_FIELDS if n not in OPTIONAL_CONDITIONS]
    return _conditions_from_pairs(pairs, "BAD_HEADER_FIELD", required)


# -- scratchpads ----------------------------------------------------------------

EDGE_NOTE = "num generated edges = the last edge id - the first edge id + 1 = {j} - {i} + 1 = {n}"
DEPTH_NOTE = "Child's remaining depth = current remaining depth - 1 = {d}"
_EDGE_NOTE_RE = re.compile(
    r"num generated edges = the last edge id - the first edge id \+ 1 = (-?\d+) - (-?\d+) \+ 1 = (-?\d+)"
)
_DEPTH_NOTE_RE = re.compile(r"Child's remaining depth = current remaining depth - 1 = (-?\d+)")


# -- layers ---------------------------------------------------------------------


def render_completion(
    conds: LayerConditions,
    edges: Sequence[LayerEdge],
    children: Sequence[LayerConditions],
    with_intermediate: bool = False,
) -> str:
    """The part of a layer the model produces: edges block then subgraph blocks."""
    out = ["<edges>"]
    out.extend(encode_layer_edge(le) for le in edges)
    if with_intermediate and edges:
        i, j = edges[0].flat_edge_id, edges[-1].flat_edge_id
        out.append(EDGE_NOTE.format(j=j, i=i, n=j - i + 1))
    out.append("</edges>")
    for child in children:
        out.append("<subgraph>")
        if with_intermediate and conds.remaining_depth is not None:
            out.append(DEPTH_NOTE.format(d=conds.remaining_depth - 1))
        out.append(f"edge_id: {child.parent_edge_id}")
        for name, attr in CONDITION_FIELDS.items():
            if name != "service_id":
                out.append(f"{name}: {getattr(child, attr)}")
        out.append("</subgraph>")
    return "\n".join(out) + "\n"


def encode_layer(
    conds: LayerConditions,
    edges: Sequence[LayerEdge],
    children: Sequence[LayerConditions],
    with_intermediate: bool = False,
    drop: Sequence[str] = (),
    origin_hash: str | None = None,
) -> TextSample:
    text = render_conditions(conds, drop) + render_completion(conds, edges, children, with_intermediate)
    return TextSample(text, SampleFormat.RECURSIVE_LAYER, origin_hash)


@dataclass
class ParsedLayer:
    """Structure recovered from layer text, with scratchpad values kept aside."""

    conditions: LayerConditions | None
    edges: list[LayerEdge]
    children: list[LayerConditions]
    edge_notes: list[tuple[int, int, int]] = field(default_factory=list)
    depth_notes: list[int | None] = field(default_factory=list)

    def __iter__(self):
        # unpacks as (edges, children)
        return iter((self.edges, self.children))


def _segments(text: str) -> list[tuple[str, list[str]]]:
    """Split text into ('header'|'edges'|'subgraph', lines) segments."""
    segments: list[tuple[str, list[str]]] = []
    block: str | None = None
    current: list[str] = []
    for raw in text.splitlines():
        line = raw.strip()
        if block is None:
            if line in ("<edges>", "<subgraph>"):
                block = line[1:-1]
                current = []
            elif line in ("</edges>", "</subgraph>"):
                raise ParseError("UNCLOSED_BLOCK", f"{line} without opening tag", line=line)
            elif line:
                if segments and segments[-1][0] == "header":
                    segments[-1][1].append(line)
                else:
                    segments.append(("header", [line]))
        else:
            if line == f"</{block}>":
                segments.append((block, current))
                block = None
            elif line in ("<edges>", "<subgraph>", "</edges>", "</subgraph>"):
                raise ParseError("UNCLOSED_BLOCK", f"<{block}> not closed before {line}", line=line)
            elif line:
                current.append(line)
    if block is not None:
        raise ParseError("UNCLOSED_BLOCK", f"<{block}> not closed")
    return segments


def _parse_segments(segments: list[tuple[str, list[str]]], service_id: str | None) -> ParsedLayer:
    header: LayerConditions | None = None
    idx = 0
    if segments and segments[0][0] == "header":
        header = parse_conditions("\n".join(segments[0][1]))
        idx = 1
    if idx >= len(segments) or segments[idx][0] != "edges":
        if any(kind == "edges" for kind, _ in segments):
            raise ParseError("STRAY_TEXT", "subgraph block before the edges block")
        raise ParseError("MISSING_EDGES_BLOCK", "no <edges> block")
    if header is not None and header.service_id is not None:
        service_id = header.service_id

    edges: list[LayerEdge] = []
    edge_notes: list[tuple[int, int, int]] = []
    for line in segments[idx][1]:
        m = _EDGE_NOTE_RE.fullmatch(line)
        if m:
            edge_notes.append((int(m.group(1)), int(m.group(2)), int(m.group(3))))
        else:
            edges.append(parse_layer_edge(line))

    children: list[LayerConditions] = []
    depth_notes: list[int | None] = []
    for kind, lines in segments[idx + 1 :]:
        if kind == "edges":
            raise ParseError("DUPLICATE_EDGES_BLOCK", "more than one <edges> block")
        if kind != "subgraph":
            raise ParseError("STRAY_TEXT", f"text outside blocks: {lines[0]!r}", line=lines[0])
        note: int | None = None
        pairs: dict[str, str] = {}
        for line in lines:
            m = _DEPTH_NOTE_RE.fullmatch(line)
            if m and note is None and not pairs:
                note = int(m.group(1))
                continue
            name, value = _kv(line, "BAD_SUBGRAPH_FIELD")
            if name in pairs:
                raise ParseError("BAD_SUBGRAPH_FIELD", f"field {name!r} repeated", name=name)
            pairs[name] = value
        child = _conditions_from_pairs(pairs, "BAD_SUBGRAPH_FIELD", SUBGRAPH_FIELDS)
        if child.service_id is None and service_id is not None:
            child = LayerConditions(**{**child.to_dict(), "service_id": service_id})
        children.append(child)
        depth_notes.append(note)
    return ParsedLayer(header, edges, children, edge_notes, depth_notes)


def parse_layer_output(text: str, service_id: str | None = None) -> ParsedLayer:
    """Parse one layer: a bare completion or a full layer with its header.

    Children inherit ``service_id`` from the header when present, otherwise
    from the argument. Unknown node names and comm types are accepted here;
    semantic checks belong to the validator.
    """
    return _parse_segments(_segments(text), service_id)


def parse_layer_sequence(text: str) -> list[ParsedLayer]:
    """Parse concatenated layers (a pre-training sample); each layer needs a header."""
    segments = _segments(text)
    groups: list[list[tuple[str, list[str]]]] = []
    for seg in segments:
        if seg[0] == "header" or not groups:
            groups.append([seg])
        else:
            groups[-1].append(seg)
    layers = []
    service_id = None
    for group in groups:
        if group[0][0] != "header":
            raise ParseError("BAD_HEADER_FIELD", "layer without header")
        parsed = _parse_segments(group, service_id)
        if parsed.conditions is not None and parsed.conditions.service_id is not None:
            service_id = parsed.conditions.service_id
        layers.append(parsed)
    return layers


def layers_from_text(text: str) -> list[Layer]:
    return [Layer(p.conditions, tuple(p.edges), tuple(p.children)) for p in parse_layer_sequence(text)]


# -- tabular format -------------------------------------------------------------


def encode_tabular_sample(
    g: CallGraph,
    seed: int | str = 0,
    drop_mask: Mapping[str, bool] | None = None,
) -> TextSample:
    """Whole-graph sample: shuffled attribute header, then one shuffled-clause line per edge.

    ``drop_mask[name]`` true removes that attribute; the service id is never
    dropped.
    """
    rng = random.Random(seed)
    attrs = attributes(g)
    values = {
        "service_id": attrs.service_id,
        "num_edges": attrs.num_edges,
        "depth": attrs.depth,
        "latency": attrs.latency_ms,
    }
    drop_mask = drop_mask or {}
    kept = [n for n in TABULAR_ATTRIBUTES if n == "service_id" or not drop_mask.get(n, False)]
    rng.shuffle(kept)
    lines = [f"{n}: {values[n]}" for n in kept]
    lines.append("<edges>")
    for e in g.edges:
        order = list(EDGE_FEATURES)
        rng.shuffle(order)
        lines.append(encode_edge_nl(e, order))
    lines.append("</edges>")
    return TextSample("\n".join(lines) + "\n", SampleFormat.TABULAR, canonical_hash(g))


def parse_tabular_header(text: str) -> dict[str, int | str]:
    segments = _segments(text)
    out: dict[str, int | str] = {}
    if segments and segments[0][0] == "header":
        for line in segments[0][1]:
            name, value = _kv(line, "BAD_HEADER_FIELD")
            if name not in TABULAR_ATTRIBUTES:
                raise ParseError("BAD_HEADER_FIELD", f"unknown attribute {name!r}", name=name)
            out[name] = value if name == "service_id" else _int_field(name, value, "BAD_HEADER_FIELD")
    return out


def parse_tabular_sample(text: str, trace_id: str = "") -> CallGraph:
    """Rebuild a graph from tabular text; raises StructuralViolation if it is not a valid graph."""
    segments = _segments(text)
    header = parse_tabular_header(text)
    blocks = [lines for kind, lines in segments if kind == "edges"]
    if not blocks:
        raise ParseError("MISSING_EDGES_BLOCK", "no <edges> block")
    if len(blocks) > 1:
        raise ParseError("DUPLICATE_EDGES_BLOCK", "more than one <edges> block")
    if any(kind == "subgraph" for kind, _ in segments):
        raise ParseError("STRAY_TEXT", "subgraph block in tabular sample")
    edges = sorted((parse_edge_nl(line) for line in blocks[0]), key=lambda e: e.edge_id)
    g = CallGraph(trace_id=trace_id, service_id=str(header.get("service_id", "")), edges=tuple(edges))
    report = check_structure(g)
    if report:
        raise StructuralViolation(report)
    return g
