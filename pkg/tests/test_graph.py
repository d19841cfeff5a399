from __future__ import annotations

import dataclasses

import pytest
from conftest import make_graph
from hypothesis import given, settings
from strategies import call_graphs

from tracegen.graph import (
    CLIENT,
    ROOT_CALLER,
    CallGraph,
    Disconnected,
    DuplicateEdgeId,
    Edge,
    InvalidEdgeTime,
    LayerConditions,
    MalformedEdgeId,
    MissingField,
    MultipleRoots,
    SourceMismatch,
    TimeNestingViolation,
    assemble_layers,
    attributes,
    build_graph,
    canonical_hash,
    check_structure,
    decompose_layers,
    format_edge_id,
    graph_prompt,
    normalize_graph,
    parse_edge_id,
)
from tracegen.validator import validate_layer


def test_edge_id_round_trip():
    assert parse_edge_id("0.1.2") == (0, 1, 2)
    assert format_edge_id((0, 1, 2)) == "0.1.2"
    for bad in ("", "0..1", "a.1", "0.-1", "1.x"):
        with pytest.raises(MalformedEdgeId):
            parse_edge_id(bad)


def test_three_edge_chain_attributes():
    g = make_graph(
        [
            ("0", CLIENT, "A", "HTTP", 0, 30),
            ("0.1", "A", "B", "RPC", 1, 20),
            ("0.1.1", "B", "C", "DB", 2, 10),
        ]
    )
    a = attributes(g)
    assert (a.num_edges, a.depth, a.latency_ms) == (3, 3, 30)


def test_star_depth_two(sample_graph):
    g = make_graph(
        [
            ("0", CLIENT, "A", "HTTP", 0, 100),
            ("0.1", "A", "B", "RPC", 1, 10),
            ("0.2", "A", "C", "RPC", 1, 10),
            ("0.3", "A", "D", "RPC", 1, 10),
        ]
    )
    assert attributes(g).depth == 2
    assert attributes(sample_graph).depth == 3


@pytest.mark.parametrize(
    "rows, error",
    [
        ([("0", CLIENT, "A", "HTTP", 0, 10), ("0.2.1", "B", "C", "RPC", 1, 2)], Disconnected),
        ([("0", CLIENT, "A", "HTTP", 0, 10), ("0.1", "A", "B", "RPC", 1, 2), ("0.1", "A", "B", "RPC", 1, 2)], DuplicateEdgeId),
        ([("0", CLIENT, "A", "HTTP", 0, 10), ("1", CLIENT, "A", "HTTP", 0, 10)], MultipleRoots),
        ([("0", CLIENT, "A", "HTTP", 0, 10), ("0.1", "X", "B", "RPC", 1, 2)], SourceMismatch),
        ([("0", CLIENT, "A", "HTTP", 5, 3)], InvalidEdgeTime),
        ([("0", CLIENT, "A", "HTTP", 0, 10), ("0.1", "A", "B", "RPC", 5, 12)], TimeNestingViolation),
    ],
)
def test_build_graph_errors(rows, error):
    with pytest.raises(error):
        make_graph(rows)


def test_missing_field():
    with pytest.raises(MissingField):
        build_graph([{"edge_id": "0", "source": CLIENT, "destination": "A", "comm_type": "", "start_ms": 0, "finish_ms": 1}])


def test_empty_input_is_rootless():
    with pytest.raises(MultipleRoots):
        build_graph([])


def test_mixed_trace_ids_rejected():
    recs = [
        {"trace_id": "a", "edge_id": "0", "source": CLIENT, "destination": "A", "comm_type": "H", "start_ms": 0, "finish_ms": 1},
        {"trace_id": "b", "edge_id": "0.1", "source": "A", "destination": "B", "comm_type": "H", "start_ms": 0, "finish_ms": 1},
    ]
    with pytest.raises(ValueError):
        build_graph(recs)


def test_check_structure_reports_every_code():
    g = CallGraph(
        "t",
        "S",
        (
            Edge((0,), CLIENT, "A", "H", 0, 10),
            Edge((1,), CLIENT, "A", "H", 0, 10),
            Edge((0, 1), "X", "B", "R", 5, 20),
            Edge((0, 1), "A", "B", "R", 1, 2),
            Edge((0, 5, 1), "B", "C", "R", 1, 2),
            Edge((0, 2), "A", "C", "R", 4, 3),
        ),
    )
    codes = {v.code for v in check_structure(g)}
    assert codes == {"G_ROOT", "G_PARENT_LINK", "G_SOURCE_MATCH", "G_TIME_NEST", "G_EDGE_TIME", "G_DUP_ID"}


def test_canonical_hash_ignores_labels_and_trace_id(sample_graph):
    relabelled = [
        Edge((0,), CLIENT, "A", "HTTP", 0, 100),
        Edge((0, 2), "A", "B", "RPC", 5, 50),
        Edge((0, 1), "A", "C", "DB", 55, 90),
        Edge((0, 2, 2), "B", "D", "MC", 10, 20),
        Edge((0, 2, 1), "B", "E", "RPC", 22, 40),
    ]
    other = build_graph(relabelled, trace_id="different", service_id="S1")
    assert canonical_hash(other) == canonical_hash(sample_graph)


def test_canonical_hash_sensitive_to_content(sample_graph):
    base = canonical_hash(sample_graph)
    for i, e in enumerate(sample_graph.edges):
        for change in ({"finish_ms": e.finish_ms + 1}, {"comm_type": "XX"}, {"destination": "Q"}):
            edges = list(sample_graph.edges)
            edges[i] = dataclasses.replace(e, **change)
            assert canonical_hash(dataclasses.replace(sample_graph, edges=tuple(edges))) != base
    assert canonical_hash(dataclasses.replace(sample_graph, service_id="S2")) != base


def test_normalize_shifts_root_to_zero():
    g = make_graph([("0", CLIENT, "A", "H", 1000, 1100), ("0.1", "A", "B", "R", 1010, 1020)])
    n = normalize_graph(g)
    assert n.root.start_ms == 0 and n.edges[1].start_ms == 10


def test_decompose_sample_graph(sample_graph):
    layers = decompose_layers(sample_graph)
    assert len(layers) == 3
    root, mid, leaf = layers
    assert root.conditions == graph_prompt(sample_graph)
    assert root.conditions.caller == ROOT_CALLER and len(root.edges) == 1
    child = root.children[0]
    assert (child.start_node, child.caller, child.remaining_depth, child.num_edges) == ("A", CLIENT, 2, 4)
    assert (child.start_edge_id, child.latency_ms, child.start_communication_at_ms) == (1, 100, 0)
    assert [le.flat_edge_id for le in mid.edges] == [1, 2]
    assert mid.children[0].parent_edge_id == 1 and mid.children[0].start_edge_id == 3
    assert leaf.conditions.remaining_depth == 1 and not leaf.children


def test_feasibility():
    def c(n, d):
        return LayerConditions(CLIENT, ROOT_CALLER, d, n, 0, None, 0)

    assert c(1, 1).feasible() and c(5, 2).feasible() and c(3, 3).feasible()
    assert not c(2, 3).feasible()
    assert not c(2, 1).feasible()  # one root edge only


@settings(max_examples=200, deadline=None)
@given(call_graphs())
def test_decompose_assemble_identity(g):
    layers = decompose_layers(g)
    assert sum(len(layer.edges) for layer in layers) == len(g.edges)
    for layer in layers:
        assert validate_layer(layer.edges, layer.children, layer.conditions) == []
    assert canonical_hash(assemble_layers(layers)) == canonical_hash(g)


@settings(max_examples=100, deadline=None)
@given(call_graphs())
def test_normalize_preserves_hash_and_structure(g):
    n = normalize_graph(g)
    assert check_structure(n) == []
    assert n.root.start_ms == 0
    shifted = normalize_graph(dataclasses.replace(g, edges=tuple(dataclasses.replace(e, start_ms=e.start_ms + 7, finish_ms=e.finish_ms + 7) for e in g.edges)))
    assert canonical_hash(shifted) == canonical_hash(n)


def test_json_round_trip(sample_graph):
    assert CallGraph.from_dict(sample_graph.to_dict()) == sample_graph
    assert set(sample_graph.to_dict()) == {"trace_id", "service_id", "edges"}
