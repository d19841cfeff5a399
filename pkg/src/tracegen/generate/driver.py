"""Recursive layer-by-layer generation.

A session starts from the graph-level prompt, asks the backend for one
layer at a time, and queues the child conditions each layer declares. When
the queue drains, the layers are folded back into a graph and checked as a
whole.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

from tracegen.codec import ParseError, parse_layer_output, render_conditions
from tracegen.generate.backends import Backend, CompletionParams
from tracegen.graph import CallGraph, Layer, LayerConditions, Violation, assemble_layers
from tracegen.validator import AccuracyVerdict, prompt_attributes, validate_generation, validate_layer_text

log = logging.getLogger(__name__)


class FailureReason(str, Enum):
    RETRY_EXHAUSTED = "RetryExhausted"
    LAYER_BUDGET_EXCEEDED = "LayerBudgetExceeded"
    ASSEMBLY_INVALID = "AssemblyInvalid"


class SessionStatus(str, Enum):
    RUNNING = "RUNNING"
    DONE = "DONE"
    FAILED = "FAILED"


@dataclass(frozen=True)
class Limits:
    max_layers: int = 512
    max_retries: int = 4
    order: str = "fifo"  # or "lifo" for depth-first
    validate_layers: bool = True

    def __post_init__(self) -> None:
        if self.order not in ("fifo", "lifo"):
            raise ValueError(f"order must be 'fifo' or 'lifo', got {self.order!r}")
        if self.max_layers < 1 or self.max_retries < 0:
            raise ValueError("max_layers must be >= 1 and max_retries >= 0")


@dataclass
class GenerationSession:
    prompt: LayerConditions
    pending: deque = field(default_factory=deque)
    produced_layers: list[Layer] = field(default_factory=list)
    retries_used: int = 0
    backend_calls: int = 0
    status: SessionStatus = SessionStatus.RUNNING
    failure: FailureReason | None = None
    last_violations: list[Violation] = field(default_factory=list)
    graph: CallGraph | None = None
    verdict: AccuracyVerdict | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status.value,
            "failure": self.failure.value if self.failure else None,
            "layers": len(self.produced_layers),
            "backend_calls": self.backend_calls,
            "retries_used": self.retries_used,
            "last_violations": [v.to_dict() for v in self.last_violations],
        }


class GenerationFailed(RuntimeError):
    def __init__(self, reason: FailureReason, session: GenerationSession, detail: str = "") -> None:
        super().__init__(f"{reason.value}: {detail}" if detail else reason.value)
        self.reason = reason
        self.session = session


def _fail(session: GenerationSession, reason: FailureReason, detail: str = "") -> GenerationFailed:
    session.status = SessionStatus.FAILED
    session.failure = reason
    return GenerationFailed(reason, session, detail)


def _generate_layer(
    backend: Backend, conds: LayerConditions, params: CompletionParams, limits: Limits, session: GenerationSession
) -> Layer:
    prompt = render_conditions(conds)
    for attempt in range(limits.max_retries + 1):
        if attempt:
            session.retries_used += 1
        text = backend.complete(prompt, replace(params, seed=params.seed + attempt))
        session.backend_calls += 1
        if limits.validate_layers:
            parsed, violations = validate_layer_text(text, conds)
        else:
            try:
                parsed, violations = parse_layer_output(text, service_id=conds.service_id), []
            except ParseError as exc:
                parsed, violations = None, [Violation("F_FORMAT", str(exc))]
        if parsed is not None and not violations:
            return Layer(conds, tuple(parsed.edges), tuple(parsed.children))
        session.last_violations = violations
        log.debug("layer at edge %d rejected: %s", conds.start_edge_id, [v.code for v in violations])
    raise _fail(
        session,
        FailureReason.RETRY_EXHAUSTED,
        f"layer at edge {conds.start_edge_id} invalid after {limits.max_retries + 1} attempts: "
        + ", ".join(sorted({v.code for v in session.last_violations})),
    )


def recursive_generate(
    backend: Backend,
    prompt: LayerConditions,
    params: CompletionParams | None = None,
    limits: Limits | None = None,
    trace_id: str = "",
) -> tuple[CallGraph, GenerationSession]:
    """Generate one graph; raises :class:`GenerationFailed` carrying the session.

    Backend errors propagate unchanged. At most ``limits.max_layers`` layers
    are requested, not counting retries.
    """
    params = params or CompletionParams()
    limits = limits or Limits()
    session = GenerationSession(prompt=prompt)
    session.pending.append(prompt)
    while session.pending:
        if len(session.produced_layers) >= limits.max_layers:
            raise _fail(session, FailureReason.LAYER_BUDGET_EXCEEDED, f"more than {limits.max_layers} layers")
        conds = session.pending.popleft() if limits.order == "fifo" else session.pending.pop()
        layer = _generate_layer(backend, conds, params, limits, session)
        session.produced_layers.append(layer)
        children = layer.children if limits.order == "fifo" else reversed(layer.children)
        session.pending.extend(children)

    try:
        g = assemble_layers(session.produced_layers, trace_id=trace_id, service_id=prompt.service_id)
    except ValueError as exc:
        raise _fail(session, FailureReason.ASSEMBLY_INVALID, str(exc)) from exc
    session.graph = g
    session.verdict = validate_generation(g, prompt_attributes(prompt))
    if not session.verdict.valid:
        session.last_violations = list(session.verdict.violations)
        raise _fail(
            session,
            FailureReason.ASSEMBLY_INVALID,
            ", ".join(v.code for v in session.verdict.violations) or "prompted attributes not met",
        )
    session.status = SessionStatus.DONE
    return g, session
