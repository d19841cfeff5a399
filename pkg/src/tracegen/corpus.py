"""Training corpora built from ingested graphs.

Three kinds are produced:

* pre-training samples: one per graph, all layers in pre-order, with the
  first layer's optional attributes dropped at random;
* instruction samples: one per layer of a sampled subset of graphs, with
  scratchpads in the output and prose plus at most one special instruction
  in the prompt;
* tabular samples: the whole graph in one edges block.

Every random choice draws from ``random.Random(f"{seed}:{index}")`` so each
graph's samples do not depend on the rest of the corpus.
"""

from __future__ import annotations

import json
import math
import os
import random
from collections.abc import Iterable, Iterator, Sequence
from dataclasses import dataclass, field
from typing import IO, Any

from tracegen.codec import (
    FORMAT_VERSION,
    OPTIONAL_CONDITIONS,
    SampleFormat,
    TextSample,
    encode_layer,
    encode_tabular_sample,
    render_completion,
    render_conditions,
)
from tracegen.graph import CallGraph, Layer, LayerConditions, attributes, canonical_hash, decompose_layers
from tracegen.ingest import CorpusStats, EmptyCorpus
from tracegen.validator import HIGH_LATENCY, UNCOMMON_COMM, Instruction

SYSTEM_PROMPT = (
    "You generate microservice call graphs one layer at a time. Given the conditions of a layer, "
    "list the calls its start node makes and the conditions of every subgraph that continues below them."
)

# first-layer attributes subject to dropping; the service id is always kept
DROPPABLE_LAYER_ATTRIBUTES = tuple(a for a in OPTIONAL_CONDITIONS if a != "service_id")
DROPPABLE_TABULAR_ATTRIBUTES = ("num_edges", "depth", "latency")

_ROOT_PROSE = {
    "service_id": (
        "This call graph belongs to service {service_id}.",
        "The request is served by service {service_id}.",
    ),
    "size": (
        "It should contain {num_edges} edges and reach depth {remaining_depth}.",
        "Generate {num_edges} calls in total, nested {remaining_depth} levels deep.",
    ),
    "latency": (
        "The whole request takes {latency} ms.",
        "End-to-end latency is {latency} ms.",
    ),
}
_LAYER_PROSE = {
    "nodes": (
        "Generate the calls made by {start_node}, which was invoked by {caller}.",
        "{start_node} was called by {caller}; list the calls it makes.",
    ),
    "size": (
        "This part of the graph has {num_edges} edges spread over {remaining_depth} levels.",
        "{num_edges} edges remain below this point, at most {remaining_depth} levels deep.",
    ),
    "window": (
        "Every call starts at or after {start} ms and finishes by {latency} ms.",
        "Calls run inside the window from {start} ms to {latency} ms.",
    ),
}


def describe_conditions(conds: LayerConditions, rng: random.Random) -> str:
    """Prose restatement of the numeric and id-valued conditions."""
    values = {
        "service_id": conds.service_id,
        "start_node": conds.start_node,
        "caller": conds.caller,
        "num_edges": conds.num_edges,
        "remaining_depth": conds.remaining_depth,
        "latency": conds.latency_ms,
        "start": conds.start_communication_at_ms,
    }
    sentences = []
    if conds.is_root:
        if conds.service_id is not None:
            sentences.append(rng.choice(_ROOT_PROSE["service_id"]))
        if conds.num_edges is not None and conds.remaining_depth is not None:
            sentences.append(rng.choice(_ROOT_PROSE["size"]))
        if conds.latency_ms is not None:
            sentences.append(rng.choice(_ROOT_PROSE["latency"]))
    else:
        sentences.append(rng.choice(_LAYER_PROSE["nodes"]))
        sentences.append(rng.choice(_LAYER_PROSE["size"]))
        sentences.append(rng.choice(_LAYER_PROSE["window"]))
    return " ".join(s.format(**values) for s in sentences)


@dataclass(frozen=True)
class InstructionSample:
    system_prompt: str
    instruction: str
    output: str
    loss_mask_boundary: int
    tags: frozenset[str] = frozenset()
    instructions: tuple[Instruction, ...] = ()
    origin_hash: str | None = None
    layer_index: int = 0

    @property
    def prompt(self) -> str:
        return self.system_prompt + "\n\n" + self.instruction

    @property
    def text(self) -> str:
        return self.prompt + self.output

    def to_dict(self) -> dict[str, Any]:
        return {
            "system_prompt": self.system_prompt,
            "instruction": self.instruction,
            "output": self.output,
            "loss_mask_boundary": self.loss_mask_boundary,
            "tags": sorted(self.tags),
            "instructions": [{"kind": i.kind, "call": list(i.call) if i.call else None} for i in self.instructions],
            "origin_hash": self.origin_hash,
            "layer_index": self.layer_index,
        }


def _instruction_sample(
    layer: Layer,
    rng: random.Random,
    special: Instruction | None,
    origin: str,
    index: int,
) -> InstructionSample:
    conds = layer.conditions
    instruction = render_conditions(conds) + describe_conditions(conds, rng) + "\n"
    if special is not None:
        instruction += special.text() + "\n"
    output = render_completion(conds, layer.edges, layer.children, with_intermediate=True)
    prompt = SYSTEM_PROMPT + "\n\n" + instruction
    return InstructionSample(
        system_prompt=SYSTEM_PROMPT,
        instruction=instruction,
        output=output,
        loss_mask_boundary=len(prompt),
        tags=frozenset({special.kind}) if special else frozenset(),
        instructions=(special,) if special else (),
        origin_hash=origin,
        layer_index=index,
    )


def _first_uncommon(layers: Sequence[Layer], g: CallGraph, stats: CorpusStats) -> tuple[int, Instruction] | None:
    for i, layer in enumerate(layers):
        for le in layer.edges:
            call = (layer.conditions.start_node, le.destination, le.comm_type)
            if stats.is_uncommon(g.service_id, call):
                return i, Instruction(UNCOMMON_COMM, call)
    return None


def build_instruction_corpus(
    graphs: Sequence[CallGraph],
    stats: CorpusStats,
    fraction: float = 0.05,
    seed: int = 0,
) -> Iterator[InstructionSample]:
    """Per-layer instruction samples for ``ceil(fraction * n)`` randomly chosen graphs.

    A graph at or above its service's p90 latency may carry the high-latency
    instruction on its first layer; a layer containing an uncommon call may
    carry the uncommon-communication instruction. A graph never gets both:
    graphs that qualify for both alternate between them, starting from the
    seed's parity.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(graphs)
    if n == 0:
        raise EmptyCorpus("no graphs to build instructions from")
    k = math.ceil(fraction * n)
    chosen = sorted(random.Random(f"{seed}:select").sample(range(n), k))
    p90 = stats.per_service_p90_latency
    both_seen = seed % 2

    for idx in chosen:
        g = graphs[idx]
        rng = random.Random(f"{seed}:{idx}")
        layers = decompose_layers(g)
        origin = canonical_hash(g)
        threshold = p90.get(g.service_id)
        high = threshold is not None and attributes(g).latency_ms >= threshold
        uncommon = _first_uncommon(layers, g, stats)

        special: dict[int, Instruction] = {}
        if high and uncommon:
            if both_seen % 2 == 0:
                special[0] = Instruction(HIGH_LATENCY)
            else:
                special[uncommon[0]] = uncommon[1]
            both_seen += 1
        elif high:
            special[0] = Instruction(HIGH_LATENCY)
        elif uncommon:
            special[uncommon[0]] = uncommon[1]

        for i, layer in enumerate(layers):
            yield _instruction_sample(layer, rng, special.get(i), origin, i)


def _drops(rng: random.Random, names: Sequence[str], p_drop: float) -> list[str]:
    return [name for name in names if rng.random() < p_drop]


def build_pretraining_corpus(graphs: Iterable[CallGraph], p_drop: float = 0.9, seed: int = 0) -> Iterator[TextSample]:
    """One recursive-format sample per graph, layers separated by a blank line."""
    if not 0 <= p_drop <= 1:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    for idx, g in enumerate(graphs):
        rng = random.Random(f"{seed}:{idx}")
        drop = _drops(rng, DROPPABLE_LAYER_ATTRIBUTES, p_drop)
        parts = [
            encode_layer(layer.conditions, layer.edges, layer.children, drop=drop if i == 0 else ()).text
            for i, layer in enumerate(decompose_layers(g))
        ]
        yield TextSample("\n".join(parts), SampleFormat.RECURSIVE_LAYER, canonical_hash(g))


def build_tabular_corpus(graphs: Iterable[CallGraph], p_drop: float = 0.9, seed: int = 0) -> Iterator[TextSample]:
    if not 0 <= p_drop <= 1:
        raise ValueError(f"p_drop must be in [0, 1], got {p_drop}")
    for idx, g in enumerate(graphs):
        rng = random.Random(f"{seed}:{idx}")
        mask = {name: rng.random() < p_drop for name in DROPPABLE_TABULAR_ATTRIBUTES}
        yield encode_tabular_sample(g, seed=f"{seed}:{idx}:shuffle", drop_mask=mask)


# -- files ---------------------------------------------------------------------


@dataclass
class CorpusHeader:
    kind: str
    seed: int
    p_drop: float | None = None
    fraction: float | None = None
    stats_digest: str | None = None
    format_version: str = FORMAT_VERSION
    extra: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        out = {
            "format_version": self.format_version,
            "kind": self.kind,
            "seed": self.seed,
            "p_drop": self.p_drop,
            "fraction": self.fraction,
            "stats_digest": self.stats_digest,
        }
        out.update(self.extra)
        return {"header": out}


def write_corpus(
    out: str | os.PathLike | IO[str],
    header: CorpusHeader,
    samples: Iterable[TextSample | InstructionSample],
) -> int:
    """Write a header line and one JSON object per sample; returns the sample count."""
    if isinstance(out, (str, os.PathLike)):
        with open(out, "w", encoding="utf-8") as fh:
            return write_corpus(fh, header, samples)
    out.write(json.dumps(header.to_dict(), sort_keys=True) + "\n")
    n = 0
    for sample in samples:
        out.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")
        n += 1
    return n


def read_corpus(path: str | os.PathLike) -> tuple[dict[str, Any], list[dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(line) for line in fh if line.strip()]
    if not lines or "header" not in lines[0]:
        raise ValueError(f"{path}: missing corpus header line")
    return lines[0]["header"], lines[1:]
