"""Microservice call-graph traces: ingestion, text codecs, recursive generation and evaluation."""

from tracegen.graph import (
    CLIENT,
    CallGraph,
    Edge,
    GraphAttributes,
    LayerConditions,
    LayerEdge,
    Violation,
    attributes,
    build_graph,
    canonical_hash,
    check_structure,
    decompose_layers,
    normalize_graph,
)

__version__ = "0.1.0"

__all__ = [
    "CLIENT",
    "CallGraph",
    "Edge",
    "GraphAttributes",
    "LayerConditions",
    "LayerEdge",
    "Violation",
    "attributes",
    "build_graph",
    "canonical_hash",
    "check_structure",
    "decompose_layers",
    "normalize_graph",
    "__version__",
]
