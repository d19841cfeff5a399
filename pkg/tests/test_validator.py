from __future__ import annotations

from dataclasses import replace

import pytest
from conftest import make_graph
from mutations import CHAIN, FORK, mutation_cases

from tracegen.codec import render_completion
from tracegen.graph import CLIENT, GraphAttributes, attributes, decompose_layers
from tracegen.ingest import compute_stats
from tracegen.validator import (
    HIGH_LATENCY,
    LAYER_CODES,
    UNCOMMON_COMM,
    Instruction,
    UnknownService,
    check_instruction_compliance,
    validate_generation,
    validate_layer,
    validate_layer_text,
)


def _codes(case):
    code, layer, text = case
    if text is not None:
        _, violations = validate_layer_text(text, layer.conditions)
    else:
        violations = validate_layer(layer.edges, layer.children, layer.conditions)
    return [v.code for v in violations]


@pytest.mark.parametrize("case", mutation_cases(), ids=lambda c: c[0])
def test_mutation_triggers_exactly_its_code(case):
    assert _codes(case) == [case[0]]


def test_catalog_is_covered():
    assert sorted(c[0] for c in mutation_cases()) == sorted(LAYER_CODES)
    assert len(LAYER_CODES) == 15


@pytest.mark.parametrize("g", [CHAIN, FORK])
def test_real_layers_are_clean(g):
    for layer in decompose_layers(g):
        assert validate_layer(layer.edges, layer.children, layer.conditions) == []
        text = render_completion(layer.conditions, layer.edges, layer.children, with_intermediate=True)
        assert validate_layer_text(text, layer.conditions)[1] == []


def test_wrong_scratchpad_is_format_error():
    layer = decompose_layers(CHAIN)[1]
    text = render_completion(layer.conditions, layer.edges, layer.children, with_intermediate=True)
    bad = text.replace("= 2 - 1 + 1 = 2", "= 2 - 1 + 1 = 3")
    assert [v.code for v in validate_layer_text(bad, layer.conditions)[1]] == ["F_FORMAT"]
    bad = text.replace("current remaining depth - 1 = 1", "current remaining depth - 1 = 2")
    assert [v.code for v in validate_layer_text(bad, layer.conditions)[1]] == ["F_FORMAT"]


def test_duplicate_child_reference():
    layer = decompose_layers(CHAIN)[1]
    dup = replace(layer.children[0], start_edge_id=5, num_edges=0)
    codes = [v.code for v in validate_layer(layer.edges, layer.children + (dup,), layer.conditions)]
    assert "S_EDGE_REF" in codes


def test_layer_with_too_many_edges():
    layer = decompose_layers(CHAIN)[2]
    conds = replace(layer.conditions, num_edges=1)
    assert "E_COUNT" in [v.code for v in validate_layer(layer.edges, (), conds)]


def test_chain_prompt_valid():
    g = make_graph([("0", CLIENT, "A", "H", 0, 30), ("0.1", "A", "B", "R", 1, 20), ("0.1.1", "B", "C", "D", 2, 10)])
    verdict = validate_generation(g, {"num_edges": 3, "depth": 3})
    assert verdict.valid and verdict.matched_num_edges and verdict.matched_depth


def test_extra_edge_mismatch(sample_graph):
    verdict = validate_generation(sample_graph, {"num_edges": 4, "depth": 3})
    assert not verdict.valid and not verdict.matched_num_edges
    assert "T_EDGE_SUM" in [v.code for v in verdict.violations]


def test_time_inversion_reported(sample_graph):
    edges = list(sample_graph.edges)
    edges[1] = replace(edges[1], finish_ms=150)
    verdict = validate_generation(replace(sample_graph, edges=tuple(edges)), attributes(sample_graph))
    assert not verdict.valid
    assert "G_TIME_NEST" in [v.code for v in verdict.violations]


def test_full_attributes_always_valid(sample_graph):
    assert validate_generation(sample_graph, attributes(sample_graph)).valid
    assert not validate_generation(sample_graph, GraphAttributes("S1", 5, 2, 100)).valid


def _latency_graph(latency, service="S1", trace="t"):
    return make_graph([("0", CLIENT, "A", "H", 0, latency)], trace_id=trace, service_id=service)


def test_high_latency_compliance():
    # ten graphs with latencies 10..100 -> nearest-rank p90 is 90
    stats = compute_stats([_latency_graph(10 * i, trace=str(i)) for i in range(1, 11)])
    assert stats.per_service_p90_latency["S1"] == 90
    assert check_instruction_compliance(_latency_graph(95), Instruction(HIGH_LATENCY), stats)
    assert not check_instruction_compliance(_latency_graph(85), Instruction(HIGH_LATENCY), stats)
    with pytest.raises(UnknownService):
        check_instruction_compliance(_latency_graph(95, service="S9"), Instruction(HIGH_LATENCY), stats)


def test_uncommon_compliance_and_conjunction(sample_graph):
    stats = compute_stats([sample_graph])
    assert not check_instruction_compliance(sample_graph, Instruction(UNCOMMON_COMM, ("A", "B", "DB")), stats)
    tag = Instruction(UNCOMMON_COMM, ("A", "B", "RPC"))
    assert check_instruction_compliance(sample_graph, tag, stats)
    both = [tag, Instruction(HIGH_LATENCY)]
    assert check_instruction_compliance(sample_graph, both, stats)  # only graph: latency equals p90
    assert not check_instruction_compliance(sample_graph, [Instruction(UNCOMMON_COMM, ("A", "Q", "DB")), Instruction(HIGH_LATENCY)], stats)


def test_instruction_text():
    assert Instruction(HIGH_LATENCY).text() == "Build a call graph with high latency"
    assert (
        Instruction(UNCOMMON_COMM, ("A", "B", "DB")).text()
        == "Include an edge from A to B with DB communication type"
    )
