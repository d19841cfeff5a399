"""Deterministic Alibaba-style trace fixture.

Produces a CSV in the 2022 call-graph release layout with realistic dirt:
float timestamps, missing-value markers, rows with the wrong cell count,
duplicated rpc ids, traces with a dropped intermediate edge, and traces
with two roots. Roughly 11k traces, of which a little over 10k survive
ingestion.
"""

from __future__ import annotations

import csv
import random
from dataclasses import dataclass

COMM_TYPES = ("RPC", "HTTP", "MQ", "DB", "MC")
HEADER = ("timestamp", "traceid", "service", "rpc_id", "um", "rpctype", "dm", "rt")
BASE_TIME = 1_650_000_000_000

# child-count weights per level; deeper levels favour leaves
LEVEL_FANOUT = {
    1: {1: 1.0},
    2: {0: 0.10, 1: 0.30, 2: 0.30, 3: 0.20, 4: 0.10},
    3: {0: 0.45, 1: 0.30, 2: 0.17, 3: 0.08},
    4: {0: 0.65, 1: 0.25, 2: 0.10},
    5: {0: 0.80, 1: 0.20},
    6: {0: 1.0},
}
TYPE_LATENCY = {"RPC": (4, 40), "HTTP": (10, 120), "MQ": (1, 10), "DB": (2, 30), "MC": (0, 4)}


@dataclass
class Row:
    timestamp: float
    trace_id: str
    service: str
    rpc_id: str
    um: str
    rpctype: str
    dm: str
    rt: float

    def cells(self) -> list[str]:
        return [
            f"{self.timestamp:.2f}",
            self.trace_id,
            self.service,
            self.rpc_id,
            self.um,
            self.rpctype,
            self.dm,
            f"{self.rt:.2f}",
        ]


class Topology:
    """Per-microservice callee preferences, fixed by the seed."""

    def __init__(self, rng: random.Random, n_services: int = 12, n_micro: int = 160) -> None:
        self.services = [f"S_{i:02d}" for i in range(n_services)]
        self.micro = [f"MS_{i:03d}" for i in range(n_micro)]
        self.entry = {s: self.micro[i * 3] for i, s in enumerate(self.services)}
        self.callees: dict[str, list[tuple[str, str, float]]] = {}
        for m in self.micro:
            k = rng.randint(3, 6)
            picks = rng.sample([x for x in self.micro if x != m], k)
            out = []
            for rank, dst in enumerate(picks):
                typ = rng.choice(COMM_TYPES)
                out.append((dst, typ, 1.0 / (rank + 1) ** 1.3))
                if rng.random() < 0.3:
                    out.append((dst, rng.choice(COMM_TYPES), 0.05 / (rank + 1)))
            self.callees[m] = out

    def call(self, source: str, rng: random.Random) -> tuple[str, str]:
        options = self.callees[source]
        dst, typ, _ = rng.choices(options, weights=[w for *_, w in options])[0]
        return dst, typ


def _weighted(table: dict[int, float], rng: random.Random) -> int:
    return rng.choices(list(table), weights=list(table.values()))[0]


def _trace(topo: Topology, rng: random.Random, trace_id: str, t0: float) -> list[Row]:
    service = rng.choice(topo.services)
    entry = topo.entry[service]
    root_rt = rng.uniform(20, 400) * (3 if rng.random() < 0.08 else 1)
    root_typ = "HTTP" if rng.random() < 0.85 else "RPC"
    rows = [Row(t0, trace_id, service, "0", rng.choice(("USER", "USER", "(?)")), root_typ, entry, root_rt)]
    frontier = [(rows[0], 1)]
    budget = 40
    while frontier:
        parent, level = frontier.pop(0)
        n = _weighted(LEVEL_FANOUT.get(level, {0: 1.0}), rng)
        for k in range(min(n, budget)):
            budget -= 1
            dst, typ = topo.call(parent.dm, rng)
            lo, hi = TYPE_LATENCY[typ]
            window = parent.rt
            rt = min(rng.uniform(lo, hi), window)
            start = parent.timestamp + rng.uniform(0, window - rt)
            child = Row(start, trace_id, service, f"{parent.rpc_id}.{k + 1}", parent.dm, typ.lower() if rng.random() < 0.1 else typ, dst, rt)
            rows.append(child)
            frontier.append((child, level + 1))
    return rows


def generate_rows(n_traces: int = 11_000, seed: int = 7) -> tuple[list[list[str]], dict[str, int]]:
    """All CSV rows (header first) and a tally of the dirt injected."""
    rng = random.Random(seed)
    topo = Topology(random.Random(seed + 1))
    dirt = {"malformed_rows": 0, "missing_leaf": 0, "disconnected": 0, "duplicate_id": 0, "two_roots": 0, "nan_rt": 0}
    out: list[list[str]] = [list(HEADER)]
    for i in range(n_traces):
        trace_id = f"T{i:06d}"
        rows = _trace(topo, rng, trace_id, BASE_TIME + rng.uniform(0, 3_600_000))
        cells = [r.cells() for r in rows]
        roll = rng.random()
        if roll < 0.015 and len(rows) > 2:
            # drop an inner edge: its children lose their parent
            inner = [j for j, r in enumerate(rows[1:], 1) if any(x.rpc_id.startswith(r.rpc_id + ".") for x in rows)]
            if inner:
                del cells[rng.choice(inner)]
                dirt["disconnected"] += 1
        elif roll < 0.030 and len(rows) > 1:
            cells.append(list(cells[-1]))
            dirt["duplicate_id"] += 1
        elif roll < 0.040:
            extra = list(cells[0])
            extra[3] = "1"
            cells.append(extra)
            dirt["two_roots"] += 1
        elif roll < 0.060 and len(rows) > 1:
            # a leaf with an unknown destination is dropped; the trace survives
            leaves = [j for j, r in enumerate(rows) if not any(x.rpc_id.startswith(r.rpc_id + ".") for x in rows)]
            j = rng.choice(leaves)
            if j != 0:
                cells[j][6] = "UNKNOWN"
                dirt["missing_leaf"] += 1
        elif roll < 0.070 and len(rows) > 1:
            leaves = [j for j, r in enumerate(rows) if not any(x.rpc_id.startswith(r.rpc_id + ".") for x in rows)]
            j = rng.choice(leaves)
            if j != 0:
                cells[j][7] = "NaN"
                dirt["nan_rt"] += 1
        if rng.random() < 0.01:
            cells.append(cells[-1][:5])
            dirt["malformed_rows"] += 1
        out.extend(cells)
    return out, dirt


def write_fixture(path, n_traces: int = 11_000, seed: int = 7, delimiter: str = ",") -> dict[str, int]:
    rows, dirt = generate_rows(n_traces, seed)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(rows)
    return dirt


SMALL_FIXTURE = """timestamp,traceid,service,rpc_id,um,rpctype,dm,rt
1000.0,TR1,S1,0,USER,http,A,50.4
1005.2,TR1,S1,0.1,A,rpc,B,20.0
1030.6,TR1,S1,0.2,A,db,C,10.3
"""
