from __future__ import annotations

import json
import subprocess
import sys

import pytest

from tracegen.cli import EXIT_BACKEND, EXIT_INVALID, EXIT_OK, EXIT_USAGE, prompt_from_dict, resolve_args, run
from tracegen.ingest import read_graphs, write_graphs


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, corpus):
    root = tmp_path_factory.mktemp("cli")
    graphs = root / "graphs.jsonl"
    write_graphs(corpus[:300], graphs)
    stats = root / "stats.json"
    assert run(["stats", "--graphs", str(graphs), "--out", str(stats)]) == EXIT_OK
    return root, graphs, stats


def test_ingest_small(small_csv, tmp_path):
    out = tmp_path / "g.jsonl"
    assert run(["ingest", "--in", str(small_csv), "--out", str(out), "--stats-out", str(tmp_path / "s.json")]) == EXIT_OK
    assert len(read_graphs(out)) == 1
    rejects = json.loads((tmp_path / "g.jsonl.rejects.json").read_text())
    assert rejects["accepted"] == 1
    manifest = json.loads((tmp_path / "g.jsonl.manifest.json").read_text())
    assert manifest["command"] == "ingest" and str(small_csv) in manifest["inputs"]
    assert "time" not in json.dumps(manifest)


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["generate", "--bogus"]) == EXIT_USAGE
    assert run(["ingest", "--out", "x"]) == EXIT_USAGE  # missing --in
    assert run(["corpus", "--graphs", "g", "--out", "o", "--kind", "poem"]) == EXIT_USAGE


def test_invalid_input(tmp_path):
    bad = tmp_path / "bad.jsonl"
    bad.write_text("{not json\n")
    assert run(["validate", "--graphs", str(bad)]) == EXIT_INVALID
    assert run(["stats", "--graphs", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path / "s")]) == EXIT_INVALID


def test_backend_failure(tmp_path, monkeypatch):
    monkeypatch.delenv("TRACEGEN_BACKEND_URL", raising=False)
    argv = ["generate", "--backend", "http", "--num-edges", "2", "--depth", "2", "--out", str(tmp_path / "o")]
    assert run(argv) == EXIT_BACKEND
    argv = ["generate", "--backend", "http", "--url", "http://127.0.0.1:9/x", "--timeout", "1",
            "--num-edges", "2", "--depth", "2", "--out", str(tmp_path / "o")]
    assert run(argv) == EXIT_BACKEND


def test_config_merge(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 5, "p_drop": 0.3, "out": "from-config"}))
    args = resolve_args(["corpus", "--graphs", "g", "--config", str(cfg), "--seed", "9"])
    assert (args.seed, args.p_drop, args.out, args.fraction) == (9, 0.3, "from-config", 0.05)
    cfg.write_text(json.dumps({"colour": "red"}))
    assert run(["corpus", "--graphs", "g", "--out", "o", "--config", str(cfg)]) == EXIT_USAGE


def test_prompt_short_form():
    p = prompt_from_dict({"num_edges": 4, "depth": 2, "latency_ms": 30, "service_id": "S_1"})
    assert (p.num_edges, p.remaining_depth, p.latency_ms, p.start_node, p.service_id) == (4, 2, 30, "Client", "S_1")


def test_validate_and_evaluate(workspace, tmp_path, capsys):
    _, graphs, _ = workspace
    verdicts = tmp_path / "v.jsonl"
    assert run(["validate", "--graphs", str(graphs), "--out", str(verdicts)]) == EXIT_OK
    lines = [json.loads(x) for x in verdicts.read_text().splitlines()]
    assert len(lines) == 300 and all(v["valid"] for v in lines)
    report = tmp_path / "r.json"
    assert run(["evaluate", "--real", str(graphs), "--syn", str(graphs), "--k", "5", "10", "--out", str(report)]) == EXIT_OK
    r = json.loads(report.read_text())
    assert abs(r["kl_popular_calls"]) <= 1e-9
    assert r["emd_in_degree"] == r["emd_out_degree"] == r["emd_response_time"] == 0
    assert set(r["heavy_hitter_similarity"].values()) == {1.0}


def test_generate_replay_and_baseline(workspace, tmp_path):
    _, graphs, stats = workspace
    out = tmp_path / "replayed.jsonl"
    assert run(["generate", "--backend", "replay", "--graphs", str(graphs), "--out", str(out), "--temperature", "0"]) == EXIT_OK
    assert read_graphs(out) and len((tmp_path / "replayed.jsonl.sessions.jsonl").read_text().splitlines()) == 300
    base = tmp_path / "base.jsonl"
    assert run(["baseline", "--stats", str(stats), "--count", "25", "--out", str(base)]) == EXIT_OK
    assert len(read_graphs(base)) == 25


def test_generate_statistical_and_grid(workspace, tmp_path):
    _, _, stats = workspace
    out = tmp_path / "gen.jsonl"
    argv = ["generate", "--stats", str(stats), "--num-edges", "6", "--depth", "3", "--count", "5", "--out", str(out)]
    assert run(argv) == EXIT_OK
    assert len(read_graphs(out)) == 5
    prefix = tmp_path / "grid"
    argv = ["accuracy-grid", "--stats", str(stats), "--edges", "1-3", "--depths", "1-2", "--samples", "4", "--out", str(prefix)]
    assert run(argv) == EXIT_OK
    assert (tmp_path / "grid.csv").read_text().startswith("depth\\num_edges,1,2,3")
    assert json.loads((tmp_path / "grid.json").read_text())["samples_per_cell"] == 4


def test_corpus_kinds(workspace, tmp_path):
    _, graphs, _ = workspace
    for kind in ("pretrain", "instruct", "tabular"):
        out = tmp_path / f"{kind}.jsonl"
        assert run(["corpus", "--graphs", str(graphs), "--kind", kind, "--out", str(out)]) == EXIT_OK
        header = json.loads(out.read_text().splitlines()[0])["header"]
        assert header["kind"] == kind


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "tracegen", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("tracegen ")
