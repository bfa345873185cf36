"""Recursive root cause localization over distributed traces and KPI metrics."""

from .coordinator import Coordinator, Dataset, PipelineConfig, PipelineResult, StageResult, localize_request
from .engine import AuditTrail, CandidateQueue, EngineConfig, TrailStep, backtrack, localize
from .errors import (
    LLMError,
    LLMTransportError,
    MalformedToolCallError,
    MalformedTraceError,
    NotAbnormalError,
    RCLError,
    RecordParseError,
    SpanNotFoundError,
    SpecError,
)
from .evaluation import EvalInstance, VoteTally, credit_match, majority_vote, mrr, recall_at_k
from .metrics_store import (
    ComponentTopology,
    FluctuationSegment,
    MetricSeries,
    MetricStore,
    n_sigma_anomalous,
    related_components,
)
from .reasoner import DeterministicPolicy, RootCauseReport
from .trace_model import BaselineTable, Span, TraceTree, build_trace_tree, children, is_abnormal_entry

__version__ = "0.1.0"

__all__ = [
    "AuditTrail",
    "BaselineTable",
    "CandidateQueue",
    "ComponentTopology",
    "Coordinator",
    "Dataset",
    "DeterministicPolicy",
    "EngineConfig",
    "EvalInstance",
    "FluctuationSegment",
    "LLMError",
    "LLMTransportError",
    "MalformedToolCallError",
    "MalformedTraceError",
    "MetricSeries",
    "MetricStore",
    "NotAbnormalError",
    "PipelineConfig",
    "PipelineResult",
    "RCLError",
    "RecordParseError",
    "RootCauseReport",
    "Span",
    "SpanNotFoundError",
    "SpecError",
    "StageResult",
    "TraceTree",
    "TrailStep",
    "VoteTally",
    "backtrack",
    "build_trace_tree",
    "children",
    "credit_match",
    "is_abnormal_entry",
    "localize",
    "localize_request",
    "majority_vote",
    "mrr",
    "n_sigma_anomalous",
    "recall_at_k",
    "related_components",
]
