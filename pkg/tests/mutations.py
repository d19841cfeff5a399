"""One single-field mutation of a valid layer per validator code."""

from __future__ import annotations

from dataclasses import replace

from tracegen.graph import CLIENT, Layer, LayerConditions, build_graph, decompose_layers

Case = tuple[str, Layer, str | None]  # code, mutated layer, optional replacement text


def _graph(rows):
    keys = ("edge_id", "source", "destination", "comm_type", "start_ms", "finish_ms")
    return build_graph([dict(zip(keys, r)) for r in rows], trace_id="m", service_id="S1")


CHAIN = _graph(
    [
        ("0", CLIENT, "A", "HTTP", 0, 100),
        ("0.1", "A", "B", "RPC", 5, 50),
        ("0.2", "A", "C", "DB", 55, 90),
        ("0.1.1", "B", "D", "MC", 10, 20),
        ("0.1.2", "B", "E", "RPC", 22, 40),
    ]
)
# two extended edges under A, each one level deep
FORK = _graph(
    [
        ("0", CLIENT, "A", "HTTP", 0, 100),
        ("0.1", "A", "B", "RPC", 5, 50),
        ("0.2", "A", "C", "DB", 55, 90),
        ("0.1.1", "B", "D", "MC", 10, 20),
        ("0.2.1", "C", "E", "RPC", 60, 70),
    ]
)


def _edit_edge(layer: Layer, i: int, **change) -> Layer:
    edges = list(layer.edges)
    edges[i] = replace(edges[i], **change)
    return layer._replace(edges=tuple(edges))


def _edit_child(layer: Layer, j: int, **change) -> Layer:
    children = list(layer.children)
    children[j] = replace(children[j], **change)
    return layer._replace(children=tuple(children))


def mutation_cases() -> list[Case]:
    root, mid, leaf = decompose_layers(CHAIN)
    fork_mid = decompose_layers(FORK)[1]
    stray = LayerConditions("D", "B", 1, 1, 5, 20, 10, "S1", parent_edge_id=3)
    return [
        ("F_FORMAT", leaf, "<edges>\nEdge ID is 3, Destination is D\n</edges>\n"),
        ("E_FIELDS", _edit_edge(leaf, 0, destination=None), None),
        ("E_COUNT", leaf._replace(conditions=replace(leaf.conditions, start_edge_id=4)), None),
        ("E_START_LOW", _edit_edge(leaf, 0, start_ms=4), None),
        ("E_START_ORDER", _edit_edge(leaf, 0, start_ms=21), None),
        ("E_FINISH_LATENCY", _edit_edge(leaf, 1, finish_ms=60), None),
        ("S_UNEXPECTED", leaf._replace(children=(stray,)), None),
        ("S_EDGE_REF", _edit_child(mid, 0, parent_edge_id=9), None),
        ("S_DEPTH_LT", _edit_child(fork_mid, 1, remaining_depth=2), None),
        ("S_DEPTH_ONE", _edit_child(root, 0, remaining_depth=1), None),
        ("S_START_NODE", _edit_child(mid, 0, start_node="Z"), None),
        ("S_CALLER", _edit_child(mid, 0, caller="Z"), None),
        ("S_LATENCY", _edit_child(mid, 0, latency_ms=60), None),
        ("S_START_TIME", _edit_child(mid, 0, start_communication_at_ms=4), None),
        ("T_EDGE_SUM", _edit_child(mid, 0, num_edges=3), None),
    ]
