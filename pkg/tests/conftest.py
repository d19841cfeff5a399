from __future__ import annotations

import sys
from collections import Counter
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from synthetic_traces import SMALL_FIXTURE, write_fixture  # noqa: E402

from tracegen.graph import build_graph  # noqa: E402
from tracegen.ingest import assemble_graphs, compute_stats, parse_trace_file  # noqa: E402


@pytest.fixture(scope="session")
def fixture_csv(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("traces") / "traces.csv"
    write_fixture(path)
    return path


@pytest.fixture(scope="session")
def ingested(fixture_csv):
    counters: Counter = Counter()
    graphs, summary = assemble_graphs(parse_trace_file(fixture_csv, counters=counters))
    return graphs, summary, counters


@pytest.fixture(scope="session")
def corpus(ingested):
    return ingested[0]


@pytest.fixture(scope="session")
def corpus_stats(corpus):
    return compute_stats(corpus)


@pytest.fixture
def small_csv(tmp_path) -> Path:
    path = tmp_path / "small.csv"
    path.write_text(SMALL_FIXTURE)
    return path


def make_graph(rows, trace_id="t", service_id="S1"):
    return build_graph(
        [dict(zip(("edge_id", "source", "destination", "comm_type", "start_ms", "finish_ms"), r)) for r in rows],
        trace_id=trace_id,
        service_id=service_id,
    )


@pytest.fixture
def sample_graph():
    # depth 3, 5 edges: root, two children, one grandchild chain under the first
    return make_graph(
        [
            ("0", "Client", "A", "HTTP", 0, 100),
            ("0.1", "A", "B", "RPC", 5, 50),
            ("0.2", "A", "C", "DB", 55, 90),
            ("0.1.1", "B", "D", "MC", 10, 20),
            ("0.1.2", "B", "E", "RPC", 22, 40),
        ]
    )
