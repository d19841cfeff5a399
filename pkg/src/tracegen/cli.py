"""Command-line entry point.

Every subcommand writes its data files plus ``<out>.manifest.json`` holding
the resolved configuration, input digests and package version, which is
enough to re-run the stage. Logs go to stderr.

Exit codes: 0 success, 1 invalid input, 2 backend failure, 64 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from collections import Counter
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from typing import Any

from tracegen import __version__
from tracegen.codec import ParseError
from tracegen.corpus import (
    CorpusHeader,
    build_instruction_corpus,
    build_pretraining_corpus,
    build_tabular_corpus,
    write_corpus,
)
from tracegen.generate import (
    BackendError,
    CompletionParams,
    GenerationFailed,
    HttpBackend,
    Limits,
    ReplayBackend,
    StatisticalTextBackend,
    fit_probabilistic,
    recursive_generate,
    sample_probabilistic,
)
from tracegen.graph import CLIENT, ROOT_CALLER, GraphError, LayerConditions, canonical_hash, graph_prompt
from tracegen.ingest import (
    ColumnSchema,
    CorpusStats,
    EmptyCorpus,
    assemble_graphs,
    compute_stats,
    parse_trace_file,
    read_graphs,
    write_graphs,
)
from tracegen.metrics import accuracy_grid, evaluate, format_report
from tracegen.validator import prompt_attributes, validate_generation

log = logging.getLogger("tracegen")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_BACKEND = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_help(sys.stderr)
        raise UsageError(message)


def _int_range(text: str) -> list[int]:
    """``"3"`` -> [3]; ``"1-10"`` -> [1..10]; ``"1,4,6"`` -> [1, 4, 6]."""
    out: list[int] = []
    for part in text.split(","):
        lo, sep, hi = part.partition("-")
        try:
            out.extend(range(int(lo), int(hi) + 1) if sep else [int(lo)])
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad range {text!r}") from None
    if not out:
        raise argparse.ArgumentTypeError(f"empty range {text!r}")
    return out


def _add_backend_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=("replay", "statistical", "http"), default="statistical")
    p.add_argument("--graphs", help="graphs JSONL answering replay prompts")
    p.add_argument("--stats", help="stats JSON the statistical backend is fitted on")
    p.add_argument("--url", help="completion endpoint (default: $TRACEGEN_BACKEND_URL)")
    p.add_argument("--timeout", type=float, default=60.0)
    p.add_argument("--temperature", type=float, default=0.8)
    p.add_argument("--top-k", type=int, default=50)
    p.add_argument("--max-tokens", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-layers", type=int, default=512)
    p.add_argument("--order", choices=("fifo", "lifo"), default="fifo")


def build_parser(suppress: bool = False) -> argparse.ArgumentParser:
    """The full parser. With ``suppress`` every default is hidden, so only explicit flags show up."""
    default = argparse.SUPPRESS if suppress else None
    parser = _Parser(prog="tracegen", description=__doc__.splitlines()[0], argument_default=default)
    parser.add_argument("--version", action="version", version=f"tracegen {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name: str, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help, argument_default=default)
        p.add_argument("--config", help="JSON file of option values; explicit flags win")
        p.add_argument("--jobs", type=int, default=1, help="worker cap")
        p.add_argument("-v", "--verbose", action="store_true", default=False)
        return p

    p = command("ingest", "parse raw trace rows into call graphs")
    p.add_argument("--in", dest="input", help="CSV/TSV trace file, optionally gzipped")
    p.add_argument("--out", help="graphs JSONL")
    p.add_argument("--stats-out", help="also write corpus statistics here")
    p.add_argument("--schema", help="JSON column mapping")

    p = command("stats", "fit corpus statistics")
    p.add_argument("--graphs")
    p.add_argument("--out")

    p = command("corpus", "build a training corpus")
    p.add_argument("--graphs")
    p.add_argument("--kind", choices=("pretrain", "instruct", "tabular"), default="pretrain")
    p.add_argument("--stats", help="stats JSON (instruct; fitted from --graphs when absent)")
    p.add_argument("--p-drop", type=float, default=0.9)
    p.add_argument("--fraction", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = command("generate", "generate graphs layer by layer")
    _add_backend_args(p)
    p.add_argument("--prompts", help="JSONL of prompts (conditions or num_edges/depth/latency_ms)")
    p.add_argument("--num-edges", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--latency", type=int)
    p.add_argument("--service-id")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--max-retries", type=int, default=4)
    p.add_argument("--out")

    p = command("baseline", "sample graphs from the probabilistic baseline")
    p.add_argument("--stats")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--max-depth", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = command("validate", "check graphs against their prompts")
    p.add_argument("--graphs")
    p.add_argument("--prompts", help="JSONL, one prompt per graph; defaults to each graph's own attributes")
    p.add_argument("--out", default="-", help="verdicts JSONL, '-' for stdout")

    p = command("evaluate", "compare a synthetic corpus to a real one")
    p.add_argument("--real")
    p.add_argument("--syn")
    p.add_argument("--training", help="graphs whose hashes count as memorized (default: --real)")
    p.add_argument("--top-n", type=int, default=100)
    p.add_argument("--k", type=int, nargs="+", default=[5, 10, 20])
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--log-base", type=float, default=math.e, help="KL logarithm base (default: natural log)")
    p.add_argument("--out", default="-", help="report JSON, '-' for stdout")

    p = command("accuracy-grid", "per-cell generation accuracy")
    _add_backend_args(p)
    p.add_argument("--edges", type=_int_range, default=_int_range("1-10"))
    p.add_argument("--depths", type=_int_range, default=_int_range("1-4"))
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--max-retries", type=int, default=0)
    p.add_argument("--service-id")
    p.add_argument("--out", help="output prefix; writes <out>.json and <out>.csv")
    if suppress:
        for subparser in sub.choices.values():
            for action in subparser._actions:
                action.default = argparse.SUPPRESS
    return parser


def resolve_args(argv: Sequence[str]) -> argparse.Namespace:
    """Defaults, then ``--config`` values, then explicit flags."""
    args = build_parser().parse_args(argv)
    if args.command is None:
        build_parser().print_help(sys.stderr)
        raise UsageError("no subcommand given")
    explicit = vars(build_parser(suppress=True).parse_args(argv))
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
        known = vars(args)
        for key, value in config.items():
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            if key not in explicit:
                setattr(args, key, value)
    for key, commands in _REQUIRED.items():
        if args.command in commands and getattr(args, key, None) is None:
            flag = "in" if key == "input" else key.replace("_", "-")
            raise UsageError(f"--{flag} is required")
    if isinstance(getattr(args, "edges", None), str):
        args.edges = _int_range(args.edges)
    if isinstance(getattr(args, "depths", None), str):
        args.depths = _int_range(args.depths)
    return args


_REQUIRED = {
    "input": ("ingest",),
    "out": ("ingest", "stats", "corpus", "generate", "baseline", "accuracy-grid"),
    "graphs": ("stats", "corpus", "validate"),
    "real": ("evaluate",),
    "syn": ("evaluate",),
}


# -- helpers ---------------------------------------------------------------------------


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out: str, args: argparse.Namespace, inputs: Sequence[str | None], extra: dict | None = None) -> None:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in ("verbose",)}
    manifest = {
        "tool": "tracegen",
        "version": __version__,
        "command": args.command,
        "config": config,
        "inputs": {p: file_digest(p) for p in inputs if p},
    }
    if extra:
        manifest.update(extra)
    with open(f"{out}.manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_stats(path: str) -> CorpusStats:
    with open(path, encoding="utf-8") as fh:
        return CorpusStats.from_json(fh.read())


def _params(args: argparse.Namespace) -> CompletionParams:
    return CompletionParams(args.temperature, args.top_k, args.max_tokens, args.seed)


def _make_backend(args: argparse.Namespace):
    if args.backend == "replay":
        if not args.graphs:
            raise UsageError("--backend replay needs --graphs")
        return ReplayBackend.from_graphs(read_graphs(args.graphs))
    if args.backend == "statistical":
        if not args.stats:
            raise UsageError("--backend statistical needs --stats")
        return StatisticalTextBackend(fit_probabilistic(_load_stats(args.stats)))
    return HttpBackend(url=args.url, timeout=args.timeout, max_in_flight=max(1, args.jobs))


def prompt_from_dict(data: dict[str, Any]) -> LayerConditions:
    """Accept full conditions or a short ``{num_edges, depth, latency_ms, service_id}`` form."""
    if "start_node" in data:
        return LayerConditions(**data)
    start = int(data.get("start_communication_at_ms", 0))
    latency = data.get("latency_ms")
    return LayerConditions(
        start_node=data.get("root", CLIENT),
        caller=ROOT_CALLER,
        remaining_depth=data.get("depth"),
        num_edges=data.get("num_edges"),
        start_edge_id=0,
        latency_ms=None if latency is None else start + int(latency),
        start_communication_at_ms=start,
        service_id=data.get("service_id"),
    )


def _read_jsonl(path: str) -> list[dict[str, Any]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _open_out(path: str):
    return sys.stdout if path == "-" else open(path, "w", encoding="utf-8")


# -- commands ----------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    schema = ColumnSchema()
    if args.schema:
        with open(args.schema, encoding="utf-8") as fh:
            schema = ColumnSchema.from_mapping(json.load(fh))
    counters: Counter = Counter()
    records = parse_trace_file(args.input, schema, counters)
    graphs, summary = assemble_graphs(records, schema)
    write_graphs(graphs, args.out)
    report = summary.to_dict()
    report.update({f"rows_{k}": v for k, v in sorted(counters.items())})
    with open(f"{args.out}.rejects.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if args.stats_out:
        if not graphs:
            raise EmptyCorpus("no graphs accepted; cannot fit statistics")
        with open(args.stats_out, "w", encoding="utf-8") as fh:
            fh.write(compute_stats(graphs).to_json() + "\n")
    log.info("accepted %d of %d traces", summary.accepted, summary.traces)
    write_manifest(args.out, args, [args.input, args.schema], {"rejects": report})
    return EXIT_OK


def cmd_stats(args: argparse.Namespace) -> int:
    stats = compute_stats(read_graphs(args.graphs))
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(stats.to_json() + "\n")
    write_manifest(args.out, args, [args.graphs], {"stats_digest": stats.digest()})
    return EXIT_OK


def cmd_corpus(args: argparse.Namespace) -> int:
    graphs = read_graphs(args.graphs)
    if not graphs:
        raise EmptyCorpus(f"{args.graphs} holds no graphs")
    digest = None
    if args.kind == "instruct":
        stats = _load_stats(args.stats) if args.stats else compute_stats(graphs)
        digest = stats.digest()
        samples = build_instruction_corpus(graphs, stats, args.fraction, args.seed)
        header = CorpusHeader("instruct", args.seed, fraction=args.fraction, stats_digest=digest)
    elif args.kind == "tabular":
        samples = build_tabular_corpus(graphs, args.p_drop, args.seed)
        header = CorpusHeader("tabular", args.seed, p_drop=args.p_drop)
    else:
        samples = build_pretraining_corpus(graphs, args.p_drop, args.seed)
        header = CorpusHeader("pretrain", args.seed, p_drop=args.p_drop)
    n = write_corpus(args.out, header, samples)
    log.info("wrote %d samples to %s", n, args.out)
    write_manifest(args.out, args, [args.graphs, args.stats], {"samples": n})
    return EXIT_OK


def _prompts(args: argparse.Namespace) -> list[LayerConditions]:
    if args.prompts:
        return [prompt_from_dict(d) for d in _read_jsonl(args.prompts)]
    if args.backend == "replay" and args.num_edges is None and args.depth is None:
        return [graph_prompt(g) for g in read_graphs(args.graphs)]
    one = prompt_from_dict(
        {"num_edges": args.num_edges, "depth": args.depth, "latency_ms": args.latency, "service_id": args.service_id}
    )
    return [one] * args.count


def cmd_generate(args: argparse.Namespace) -> int:
    backend = _make_backend(args)
    prompts = _prompts(args)
    params = _params(args)
    limits = Limits(max_layers=args.max_layers, max_retries=args.max_retries, order=args.order)

    def run(i: int):
        p = prompts[i]
        try:
            g, session = recursive_generate(backend, p, _with_seed(params, i), limits, trace_id=f"gen-{i}")
            return g, session.to_dict()
        except GenerationFailed as exc:
            return None, exc.session.to_dict()

    workers = args.jobs if backend.concurrent else 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, range(len(prompts))))
    else:
        results = [run(i) for i in range(len(prompts))]
    write_graphs([g for g, _ in results if g is not None], args.out)
    with open(f"{args.out}.sessions.jsonl", "w", encoding="utf-8") as fh:
        for i, (_, s) in enumerate(results):
            fh.write(json.dumps({"index": i, **s}, sort_keys=True) + "\n")
    done = sum(g is not None for g, _ in results)
    log.info("%d of %d sessions done", done, len(prompts))
    write_manifest(args.out, args, [args.graphs, args.stats, args.prompts], {"done": done, "sessions": len(prompts)})
    return EXIT_OK


def _with_seed(params: CompletionParams, i: int) -> CompletionParams:
    return CompletionParams(params.temperature, params.top_k, params.max_tokens, params.seed * 1_000_003 + i)


def cmd_baseline(args: argparse.Namespace) -> int:
    model = fit_probabilistic(_load_stats(args.stats))
    graphs = [
        sample_probabilistic(model, max_depth=args.max_depth, seed=f"{args.seed}:{i}", trace_id=f"base-{i}")
        for i in range(args.count)
    ]
    write_graphs(graphs, args.out)
    write_manifest(args.out, args, [args.stats])
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    graphs = read_graphs(args.graphs)
    if args.prompts:
        prompts = _read_jsonl(args.prompts)
        if len(prompts) != len(graphs):
            raise ValueError(f"{len(graphs)} graphs but {len(prompts)} prompts")
        wants = [prompt_attributes(prompt_from_dict(d)) if "start_node" in d else d for d in prompts]
    else:
        wants = [prompt_attributes(graph_prompt(g)) for g in graphs]
    fh = _open_out(args.out)
    invalid = 0
    try:
        for g, want in zip(graphs, wants):
            verdict = validate_generation(g, want)
            invalid += not verdict.valid
            fh.write(json.dumps({"trace_id": g.trace_id, **verdict.to_dict()}, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    log.info("%d of %d graphs valid", len(graphs) - invalid, len(graphs))
    if args.out != "-":
        write_manifest(args.out, args, [args.graphs, args.prompts])
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    real = read_graphs(args.real)
    syn = read_graphs(args.syn)
    training = read_graphs(args.training) if args.training else real
    report = evaluate(real, syn, args.top_n, args.k, args.eps, {canonical_hash(g) for g in training}, args.log_base)
    sys.stderr.write(format_report(report))
    fh = _open_out(args.out)
    try:
        fh.write(json.dumps(report, indent=2, sort_keys=True) + "\n")
    finally:
        if fh is not sys.stdout:
            fh.close()
    if args.out != "-":
        write_manifest(args.out, args, [args.real, args.syn, args.training])
    return EXIT_OK


def cmd_accuracy_grid(args: argparse.Namespace) -> int:
    backend = _make_backend(args)
    limits = Limits(max_layers=args.max_layers, max_retries=args.max_retries, order=args.order)
    grid = accuracy_grid(
        backend, args.edges, args.depths, args.samples, _params(args), limits, args.jobs, args.service_id
    )
    with open(f"{args.out}.json", "w", encoding="utf-8") as fh:
        fh.write(grid.to_json())
    with open(f"{args.out}.csv", "w", encoding="utf-8") as fh:
        fh.write(grid.to_csv())
    sys.stderr.write(grid.to_csv())
    write_manifest(args.out, args, [args.graphs, args.stats])
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "stats": cmd_stats,
    "corpus": cmd_corpus,
    "generate": cmd_generate,
    "baseline": cmd_baseline,
    "validate": cmd_validate,
    "evaluate": cmd_evaluate,
    "accuracy-grid": cmd_accuracy_grid,
}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = resolve_args(argv)
    except UsageError as exc:
        build_parser().print_usage(sys.stderr)
        sys.stderr.write(f"tracegen: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"tracegen: {exc}\n")
        return EXIT_USAGE
    except BackendError as exc:
        log.error("backend failure: %s", exc)
        return EXIT_BACKEND
    except (OSError, ValueError, KeyError, TypeError, GraphError, ParseError, EmptyCorpus) as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
