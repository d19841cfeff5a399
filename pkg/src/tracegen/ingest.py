"""Read tabular RPC traces, assemble call graphs and fit corpus statistics.

The default column mapping follows the Alibaba 2022 microservice call-graph
release (``timestamp, traceid, service, rpc_id, um, rpctype, dm, rt``).
Times are rounded half-up to whole milliseconds; each accepted graph is
shifted so its root starts at 0 and relabelled with canonical edge ids.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import io
import json
import logging
import math
import os
from collections import Counter, defaultdict
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import dataclass, field, fields
from typing import IO, Any

from tracegen.graph import CLIENT, CallGraph, GraphError, build_graph, canonical_hash, normalize_graph

log = logging.getLogger(__name__)


class EmptyCorpus(ValueError):
    pass


@dataclass(frozen=True)
class RawEdgeRecord:
    trace_id: str | None
    rpc_id: str | None
    upstream: str | None
    downstream: str | None
    rpc_type: str | None
    response_time_ms: float | None
    timestamp_ms: float | None
    service_id: str | None = None


@dataclass(frozen=True)
class ColumnSchema:
    """Which header column feeds each record field."""

    trace_id: str = "traceid"
    rpc_id: str = "rpc_id"
    upstream: str = "um"
    downstream: str = "dm"
    rpc_type: str = "rpctype"
    response_time_ms: str = "rt"
    timestamp_ms: str = "timestamp"
    service_id: str = "service"
    missing_markers: tuple[str, ...] = ("", "UNKNOWN", "UNAVAILABLE", "NAN", "NaN", "nan", "NULL", "null", "(?)")
    client_aliases: tuple[str, ...] = ("USER", "Client", "client")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> ColumnSchema:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown schema keys: {sorted(unknown)}")
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**kwargs)


DEFAULT_SCHEMA = ColumnSchema()
_NUMERIC = ("response_time_ms", "timestamp_ms")
_RECORD_FIELDS = tuple(f.name for f in fields(RawEdgeRecord))


def _text_stream(source: str | os.PathLike | IO) -> IO[str]:
    if isinstance(source, (str, os.PathLike)):
        raw: IO[bytes] = open(source, "rb")
    elif isinstance(source, io.TextIOBase):
        return source  # type: ignore[return-value]
    else:
        raw = source  # type: ignore[assignment]
    buffered = raw if hasattr(raw, "peek") else io.BufferedReader(raw)  # type: ignore[arg-type]
    if buffered.peek(2)[:2] == b"\x1f\x8b":
        buffered = gzip.GzipFile(fileobj=buffered)  # type: ignore[assignment]
    return io.TextIOWrapper(buffered, encoding="utf-8", newline="")


def parse_trace_file(
    source: str | os.PathLike | IO,
    schema: ColumnSchema = DEFAULT_SCHEMA,
    counters: Counter | None = None,
) -> Iterator[RawEdgeRecord]:
    """Yield one record per data row of a comma- or tab-delimited table.

    Rows with the wrong number of cells are skipped and counted under
    ``counters["malformed_rows"]``. Missing or unparsable cells become
    ``None``.
    """
    counters = counters if counters is not None else Counter()
    stream = _text_stream(source)
    header_line = stream.readline()
    if not header_line:
        return
    delimiter = "\t" if "\t" in header_line else ","
    header = next(csv.reader([header_line], delimiter=delimiter))
    header = [h.strip() for h in header]
    columns = {name: header.index(getattr(schema, name)) for name in _RECORD_FIELDS if getattr(schema, name) in header}
    missing = set(schema.missing_markers)

    for row in csv.reader(stream, delimiter=delimiter):
        if not row:
            continue
        if len(row) != len(header):
            counters["malformed_rows"] += 1
            continue
        values: dict[str, Any] = {}
        for name in _RECORD_FIELDS:
            idx = columns.get(name)
            cell = row[idx].strip() if idx is not None else ""
            if cell in missing:
                values[name] = None
            elif name in _NUMERIC:
                try:
                    number = float(cell)
                except ValueError:
                    number = math.nan
                values[name] = number if math.isfinite(number) else None
            else:
                values[name] = cell
        counters["rows"] += 1
        yield RawEdgeRecord(**values)


def round_half_up(value: float) -> int:
    return math.floor(value + 0.5)


@dataclass
class RejectSummary:
    traces: int = 0
    accepted: int = 0
    dropped_records: int = 0
    rejected: Counter = field(default_factory=Counter)

    def to_dict(self) -> dict[str, Any]:
        return {
            "traces": self.traces,
            "accepted": self.accepted,
            "dropped_records": self.dropped_records,
            "rejected": dict(sorted(self.rejected.items())),
        }


def _edge_record(rec: RawEdgeRecord, schema: ColumnSchema) -> dict[str, Any] | None:
    rpc_id = rec.rpc_id
    source = rec.upstream
    is_root = rpc_id is not None and "." not in rpc_id.strip()
    if source in schema.client_aliases or (source is None and is_root):
        source = CLIENT
    if None in (rpc_id, source, rec.downstream, rec.rpc_type, rec.timestamp_ms, rec.response_time_ms):
        return None
    start = rec.timestamp_ms
    return {
        "edge_id": rpc_id,
        "source": source,
        "destination": rec.downstream,
        "comm_type": rec.rpc_type.upper(),  # type: ignore[union-attr]
        "start_ms": round_half_up(start),  # type: ignore[arg-type]
        "finish_ms": round_half_up(start + rec.response_time_ms),  # type: ignore[operator]
        "service_id": rec.service_id,
        "_root": is_root,
    }


def assemble_graphs(
    records: Iterable[RawEdgeRecord],
    schema: ColumnSchema = DEFAULT_SCHEMA,
) -> tuple[list[CallGraph], RejectSummary]:
    """Group records by trace id and build one normalized graph per trace.

    Records missing a field are dropped; traces whose remaining records do
    not form a valid graph are rejected and counted by error class.
    """
    summary = RejectSummary()
    by_trace: dict[str, list[dict[str, Any]]] = {}
    for rec in records:
        if rec.trace_id is None:
            summary.dropped_records += 1
            continue
        group = by_trace.setdefault(rec.trace_id, [])
        edge = _edge_record(rec, schema)
        if edge is None:
            summary.dropped_records += 1
            continue
        group.append(edge)

    graphs: list[CallGraph] = []
    for trace_id, group in by_trace.items():
        summary.traces += 1
        services = [e["service_id"] for e in group if e["_root"] and e["service_id"]]
        services += [e["service_id"] for e in group if e["service_id"]]
        try:
            g = build_graph(
                ({k: v for k, v in e.items() if k != "_root"} for e in group),
                trace_id=trace_id,
                service_id=services[0] if services else "",
            )
        except GraphError as exc:
            summary.rejected[type(exc).__name__] += 1
            continue
        graphs.append(normalize_graph(g))
    summary.accepted = len(graphs)
    log.info("assembled %d graphs from %d traces (%s)", summary.accepted, summary.traces, summary.to_dict())
    return graphs, summary


def graph_records(g: CallGraph) -> list[RawEdgeRecord]:
    """Flatten a graph back into raw records (inverse of assembly)."""
    return [
        RawEdgeRecord(
            trace_id=g.trace_id,
            rpc_id=e.dotted_id,
            upstream=e.source,
            downstream=e.destination,
            rpc_type=e.comm_type,
            response_time_ms=float(e.finish_ms - e.start_ms),
            timestamp_ms=float(e.start_ms),
            service_id=g.service_id,
        )
        for e in g.edges
    ]


def write_trace_csv(graphs: Iterable[CallGraph], out: IO[str], schema: ColumnSchema = DEFAULT_SCHEMA) -> None:
    cols = [getattr(schema, name) for name in _RECORD_FIELDS]
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(cols)
    for g in graphs:
        for rec in graph_records(g):
            row = []
            for name in _RECORD_FIELDS:
                v = getattr(rec, name)
                row.append(f"{v:g}" if isinstance(v, float) else v)
            writer.writerow(row)


def deduplicate(graphs: Iterable[CallGraph]) -> list[CallGraph]:
    """Keep the first graph of every canonical hash, preserving order."""
    seen: set[str] = set()
    out = []
    for g in graphs:
        h = canonical_hash(g)
        if h not in seen:
            seen.add(h)
            out.append(g)
    return out


def read_graphs(path: str | os.PathLike) -> list[CallGraph]:
    with open(path, encoding="utf-8") as fh:
        return [CallGraph.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_graphs(graphs: Iterable[CallGraph], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            fh.write(g.to_json() + "\n")


# -- statistics ----------------------------------------------------------------


def nearest_rank_percentile(counts: Mapping[int, int], pct: int = 90) -> int:
    """Value at rank ceil(pct/100 * n) of the sorted sample given as value -> count."""
    n = sum(counts.values())
    if n == 0:
        raise EmptyCorpus("percentile of an empty sample")
    rank = max(1, -(-pct * n // 100))
    seen = 0
    for value in sorted(counts):
        seen += counts[value]
        if seen >= rank:
            return value
    raise AssertionError("unreachable")


def normalize(counts: Mapping[Any, int]) -> dict[Any, float]:
    total = sum(counts.values())
    if total == 0:
        return {}
    return {k: v / total for k, v in counts.items()}


def _nested_counter() -> defaultdict:
    return defaultdict(Counter)


UNCOMMON_SHARE = 0.10


@dataclass
class CorpusStats:
    """Raw counts fitted on a corpus; normalized views are derived on access.

    Counts (not probabilities) are stored so partial statistics from shards
    merge by addition.
    """

    call_freq: Counter = field(default_factory=Counter)
    service_latencies: defaultdict = field(default_factory=_nested_counter)
    service_calls: defaultdict = field(default_factory=_nested_counter)
    child_counts: defaultdict = field(default_factory=_nested_counter)
    comm_types: Counter = field(default_factory=Counter)
    comm_types_by_level: defaultdict = field(default_factory=_nested_counter)
    response_times: defaultdict = field(default_factory=_nested_counter)
    depths: Counter = field(default_factory=Counter)
    edge_counts: Counter = field(default_factory=Counter)
    services: Counter = field(default_factory=Counter)
    total_graphs: int = 0

    def add(self, g: CallGraph) -> None:
        kids = Counter(e.edge_id[:-1] for e in g.edges if len(e.edge_id) > 1)
        root = g.root
        self.total_graphs += 1
        self.services[g.service_id] += 1
        self.service_latencies[g.service_id][root.finish_ms - root.start_ms] += 1
        self.edge_counts[len(g.edges)] += 1
        self.depths[max(len(e.edge_id) for e in g.edges)] += 1
        for e in g.edges:
            level = len(e.edge_id)
            self.call_freq[e.triple] += 1
            self.service_calls[g.service_id][e.triple] += 1
            self.child_counts[level][kids.get(e.edge_id, 0)] += 1
            self.comm_types[e.comm_type] += 1
            self.comm_types_by_level[level][e.comm_type] += 1
            self.response_times[e.comm_type][e.finish_ms - e.start_ms] += 1

    def merge(self, other: CorpusStats) -> CorpusStats:
        out = CorpusStats.from_dict(self.to_dict())
        out.call_freq.update(other.call_freq)
        out.comm_types.update(other.comm_types)
        out.depths.update(other.depths)
        out.edge_counts.update(other.edge_counts)
        out.services.update(other.services)
        for name in ("service_latencies", "service_calls", "child_counts", "comm_types_by_level", "response_times"):
            mine = getattr(out, name)
            for key, counter in getattr(other, name).items():
                mine[key].update(counter)
        out.total_graphs += other.total_graphs
        return out

    # normalized views

    @property
    def per_service_p90_latency(self) -> dict[str, int]:
        return {s: nearest_rank_percentile(c, 90) for s, c in self.service_latencies.items() if c}

    @property
    def child_count_dist(self) -> dict[int, dict[int, float]]:
        return {level: normalize(c) for level, c in self.child_counts.items()}

    @property
    def comm_type_dist(self) -> dict[str, float]:
        return normalize(self.comm_types)

    @property
    def response_time_dist(self) -> dict[str, dict[int, float]]:
        return {t: normalize(c) for t, c in self.response_times.items()}

    @property
    def total_edges(self) -> int:
        return sum(self.call_freq.values())

    def call_share(self, service_id: str, triple: tuple[str, str, str]) -> float:
        calls = self.service_calls.get(service_id)
        if not calls:
            return 0.0
        return calls[triple] / sum(calls.values())

    def is_uncommon(self, service_id: str, triple: tuple[str, str, str]) -> bool:
        """A call is uncommon when it makes up less than 10% of its service's edges."""
        return self.call_share(service_id, triple) < UNCOMMON_SHARE

    # serialization

    def to_dict(self) -> dict[str, Any]:
        def nested(d: Mapping) -> dict[str, list]:
            return {str(k): sorted([kk, vv] for kk, vv in c.items()) for k, c in sorted(d.items())}

        return {
            "total_graphs": self.total_graphs,
            "call_freq": sorted([*k, v] for k, v in self.call_freq.items()),
            "service_calls": {
                s: sorted([*k, v] for k, v in c.items()) for s, c in sorted(self.service_calls.items())
            },
            "service_latencies": nested(self.service_latencies),
            "child_counts": nested(self.child_counts),
            "comm_types": dict(sorted(self.comm_types.items())),
            "comm_types_by_level": nested(self.comm_types_by_level),
            "response_times": nested(self.response_times),
            "depths": sorted([k, v] for k, v in self.depths.items()),
            "edge_counts": sorted([k, v] for k, v in self.edge_counts.items()),
            "services": dict(sorted(self.services.items())),
            "per_service_p90_latency": dict(sorted(self.per_service_p90_latency.items())),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> CorpusStats:
        s = cls(total_graphs=int(data["total_graphs"]))
        s.call_freq.update({(a, b, c): n for a, b, c, n in data["call_freq"]})
        for svc, rows in data["service_calls"].items():
            s.service_calls[svc].update({(a, b, c): n for a, b, c, n in rows})
        for svc, rows in data["service_latencies"].items():
            s.service_latencies[svc].update({k: n for k, n in rows})
        for level, rows in data["child_counts"].items():
            s.child_counts[int(level)].update({k: n for k, n in rows})
        s.comm_types.update(data["comm_types"])
        for level, rows in data["comm_types_by_level"].items():
            s.comm_types_by_level[int(level)].update({k: n for k, n in rows})
        for typ, rows in data["response_times"].items():
            s.response_times[typ].update({k: n for k, n in rows})
        s.depths.update({k: n for k, n in data["depths"]})
        s.edge_counts.update({k: n for k, n in data["edge_counts"]})
        s.services.update(data["services"])
        return s

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> CorpusStats:
        return cls.from_dict(json.loads(text))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def compute_stats(graphs: Iterable[CallGraph]) -> CorpusStats:
    stats = CorpusStats()
    for g in graphs:
        stats.add(g)
    if stats.total_graphs == 0:
        raise EmptyCorpus("cannot fit statistics on an empty corpus")
    return stats
