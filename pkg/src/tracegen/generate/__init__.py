from tracegen.generate.backends import (
    Backend,
    BackendError,
    BackendTimeout,
    BackendUnavailable,
    CompletionParams,
    EmptyCompletion,
    HttpBackend,
    ReplayBackend,
    ReplayMiss,
    StatisticalTextBackend,
    UnparsablePrompt,
)
from tracegen.generate.driver import (
    FailureReason,
    GenerationFailed,
    GenerationSession,
    Limits,
    SessionStatus,
    recursive_generate,
)
from tracegen.generate.probabilistic import ProbModel, fit_probabilistic, sample_probabilistic

__all__ = [
    "Backend",
    "BackendError",
    "BackendTimeout",
    "BackendUnavailable",
    "CompletionParams",
    "EmptyCompletion",
    "FailureReason",
    "GenerationFailed",
    "GenerationSession",
    "HttpBackend",
    "Limits",
    "ProbModel",
    "ReplayBackend",
    "ReplayMiss",
    "SessionStatus",
    "StatisticalTextBackend",
    "UnparsablePrompt",
    "fit_probabilistic",
    "recursive_generate",
    "sample_probabilistic",
]
