"""Recursive search over a request's span tree with metric confirmation and backtracking."""

from __future__ import annotations

import enum
import logging
from collections import deque
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from typing import Any

from .errors import PreconditionError
from .metrics_store import (
    DEFAULT_DELTA_MS,
    DEFAULT_N_SIGMA,
    ComponentTopology,
    FluctuationSegment,
    MetricStore,
    rank_fluctuations,
)
from .reasoner import (
    CandidateComponent,
    Descend,
    Policy,
    PotentialRootCause,
    QueryTuple,
    ReasoningContext,
    RootCauseReport,
    assess_candidate,
    candidates_for_span,
    describe_decision,
    format_report,
    infer_query,
    verify_with_metrics,
)
from .trace_model import ChildInfo, TraceTree, children

logger = logging.getLogger(__name__)

DEFAULT_MAX_ASSESSED = 200

MetricQuery = Callable[[QueryTuple, int], Sequence[FluctuationSegment]]


class SpanState(str, enum.Enum):
    UNINSPECTED = "uninspected"
    INSPECTED = "inspected"
    CONFIRMED = "confirmed"
    DISCARDED = "discarded"


class CandidateQueue:
    """Spans awaiting or having received inspection, in enqueue order.

    A span id is admitted at most once over the queue's lifetime.
    """

    def __init__(self, span_ids: Iterable[str] = ()):
        self._state: dict[str, SpanState] = {}
        self._pending: deque[str] = deque()
        for s in span_ids:
            self.add(s)

    def add(self, span_id: str) -> bool:
        if span_id in self._state:
            return False
        self._state[span_id] = SpanState.UNINSPECTED
        self._pending.append(span_id)
        return True

    def mark(self, span_id: str, state: SpanState) -> None:
        if span_id not in self._state:
            raise KeyError(span_id)
        self._state[span_id] = state

    def state(self, span_id: str) -> SpanState:
        return self._state[span_id]

    @property
    def entries(self) -> list[tuple[str, SpanState]]:
        return list(self._state.items())

    def with_state(self, state: SpanState) -> list[str]:
        return [s for s, st in self._state.items() if st is state]

    def next_uninspected(self) -> str | None:
        while self._pending and self._state[self._pending[0]] is not SpanState.UNINSPECTED:
            self._pending.popleft()
        return self._pending[0] if self._pending else None

    def __len__(self) -> int:
        return len(self._state)

    def __contains__(self, span_id: object) -> bool:
        return span_id in self._state


def backtrack(queue: CandidateQueue) -> str | None:
    """Oldest candidate not yet inspected, or None when the search is exhausted."""
    return queue.next_uninspected()


# --------------------------------------------------------------------------- audit trail


@dataclass(frozen=True)
class TrailStep:
    step: int
    focus: str
    instruction: str
    agent: str
    data_summary: str
    decision: str
    metric_verdict: dict[str, Any] | None = None
    stage: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "step": self.step,
            "stage": self.stage,
            "focus": self.focus,
            "instruction": self.instruction,
            "agent": self.agent,
            "data_summary": self.data_summary,
            "decision": self.decision,
            "metric_verdict": self.metric_verdict,
        }


@dataclass
class AuditTrail:
    steps: list[TrailStep] = field(default_factory=list)
    start: int = 1

    def record(self, **kwargs: Any) -> TrailStep:
        idx = self.steps[-1].step + 1 if self.steps else self.start
        step = TrailStep(step=idx, **kwargs)
        self.steps.append(step)
        return step

    def extend(self, other: Iterable[TrailStep]) -> None:
        for s in other:
            if self.steps and s.step <= self.steps[-1].step:
                raise ValueError("trail step indices must increase")
            self.steps.append(s)

    @property
    def next_index(self) -> int:
        return self.steps[-1].step + 1 if self.steps else self.start

    def agents(self) -> list[str]:
        return [s.agent for s in self.steps]

    def to_list(self) -> list[dict[str, Any]]:
        return [s.to_dict() for s in self.steps]

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)


def summarize_children(data: Sequence[ChildInfo], limit: int = 6) -> str:
    if not data:
        return "no children"
    parts = [
        f"{c.span_id}:{c.service}:{c.operation} d={c.duration}us code={c.status_code}"
        for c in data[:limit]
    ]
    more = f" (+{len(data) - limit} more)" if len(data) > limit else ""
    return f"{len(data)} children: " + "; ".join(parts) + more


# --------------------------------------------------------------------------- engine


@dataclass(frozen=True)
class EngineConfig:
    n: float = DEFAULT_N_SIGMA
    delta: int = DEFAULT_DELTA_MS
    max_assessed: int = DEFAULT_MAX_ASSESSED

    def __post_init__(self):
        if self.n <= 0 or self.delta <= 0 or self.max_assessed <= 0:
            raise ValueError("n, delta and max_assessed must be positive")


@dataclass
class LocalizationResult:
    report: RootCauseReport
    trail: AuditTrail
    confirmed: list[CandidateComponent]
    trace_candidates: list[CandidateComponent]
    discarded: list[CandidateComponent]
    queue: CandidateQueue
    assessed: list[str]
    exhausted: bool = False
    diagnostics: list[str] = field(default_factory=list)


def store_query(store: MetricStore, topology: ComponentTopology | None, n: float, delta: int) -> MetricQuery:
    """Adapt a :class:`MetricStore` to the engine's query callable."""

    def query(q: QueryTuple, t0: int) -> list[FluctuationSegment]:
        seen: dict[tuple[str, str], FluctuationSegment] = {}
        for comp in q.keywords:
            for seg in store.query_fluctuations(t0, delta, comp, n, topology):
                if q.window[0] <= seg.onset <= q.window[1]:
                    seen.setdefault((seg.component_id, seg.kpi_name), seg)
        return list(seen.values())

    return query


def _merge_confirmed(pool: dict[str, CandidateComponent], new: Iterable[CandidateComponent]) -> None:
    for c in new:
        old = pool.get(c.id)
        if old is None or c.confirmation.peak_z > old.confirmation.peak_z:  # type: ignore[union-attr]
            pool[c.id] = c


def rank_candidates(cands: Iterable[CandidateComponent]) -> list[CandidateComponent]:
    """Confirmed candidates ordered by the strength of their fluctuation."""
    cands = list(cands)
    order = {id(s): i for i, s in enumerate(rank_fluctuations([c.confirmation for c in cands]))}
    return sorted(cands, key=lambda c: order[id(c.confirmation)])


def localize(
    tree: TraceTree,
    policy: Policy,
    metric_query: MetricStore | MetricQuery | None,
    topology: ComponentTopology | None,
    config: EngineConfig = EngineConfig(),
    *,
    seeds: Sequence[str] | None = None,
    forced: Iterable[str] = (),
    verify: bool = True,
    stage: str = "",
    step_start: int = 1,
) -> LocalizationResult:
    """Recursion-of-thought search from the entry span (or ``seeds``).

    Each dequeued span is assessed by ``policy`` on its children. A potential
    root cause is widened to pod/service/node candidates and checked against
    metric fluctuations around the entry timestamp; without confirmation the
    span is discarded. ``verify=False`` skips the metric step and keeps
    potential root causes provisionally. Spans in ``forced`` also get their
    children queued when judged a root cause, so at least one deeper level is
    inspected before settling.
    """
    if tree is None or len(tree) == 0:
        raise PreconditionError("localize needs a non-empty trace tree")
    if isinstance(metric_query, MetricStore):
        data_range = metric_query.time_range()
        query = store_query(metric_query, topology, config.n, config.delta)
    else:
        data_range = None
        query = metric_query
    if verify and query is None:
        raise PreconditionError("verification requested without a metric source")

    baselines = getattr(policy, "baselines", None)
    forced = set(forced)
    queue = CandidateQueue(seeds if seeds else [tree.entry.span_id])
    for s, _ in queue.entries:
        tree.span(s)  # unknown seed -> SpanNotFoundError
    ctx = ReasoningContext.for_tree(tree)
    trail = AuditTrail(start=step_start)
    diagnostics: list[str] = []
    confirmed: dict[str, CandidateComponent] = {}
    discarded: dict[str, CandidateComponent] = {}
    trace_only: list[tuple[int, CandidateComponent]] = []
    assessed: list[str] = []
    exhausted = False

    while (span_id := backtrack(queue)) is not None:
        if len(assessed) >= config.max_assessed:
            exhausted = True
            diagnostics.append(f"assessment budget of {config.max_assessed} spans exhausted")
            break
        data = children(tree, span_id)
        decision = assess_candidate(policy, span_id, data, ctx)
        queue.mark(span_id, SpanState.INSPECTED)
        assessed.append(span_id)
        trail.record(
            stage=stage,
            focus=span_id,
            instruction=ctx.evidence[-1] if ctx.evidence else "",
            agent="trace",
            data_summary=summarize_children(data),
            decision=describe_decision(decision),
        )

        if isinstance(decision, PotentialRootCause):
            cands = candidates_for_span(tree, span_id, topology, baselines, diagnostics=diagnostics)
            trace_only.append((tree.depth(span_id), cands[0]))
            if verify:
                q = infer_query(ctx, cands, config.delta, data_range)
                segs = query(q, ctx.t0)  # type: ignore[misc]
                ok, bad = verify_with_metrics(cands, segs)
                _merge_confirmed(confirmed, ok)
                for c in bad:
                    discarded.setdefault(c.id, c)
                queue.mark(span_id, SpanState.CONFIRMED if ok else SpanState.DISCARDED)
                verdict = {
                    "query": {"keywords": list(q.keywords), "window": list(q.window)},
                    "confirmed": [
                        {"id": c.id, "kpi": c.confirmation.kpi_name, "peak_z": round(c.confirmation.peak_z, 6),
                         "onset": c.confirmation.onset}
                        for c in ok
                    ],
                    "discarded": [c.id for c in bad],
                }
                trail.record(
                    stage=stage,
                    focus=span_id,
                    instruction=f"check metrics of {', '.join(q.keywords)} in {q.window[0]}..{q.window[1]}",
                    agent="metric",
                    data_summary=f"{len(segs)} fluctuating series",
                    decision="confirmed" if ok else "discarded",
                    metric_verdict=verdict,
                )
            if span_id in forced and data:
                for c in data:
                    queue.add(c.span_id)
                ctx.evidence.append(f"forced deeper inspection below {span_id}")
        elif isinstance(decision, Descend):
            for cid in decision.child_ids:
                queue.add(cid)

    ranked = rank_candidates(confirmed.values())
    # deepest trace-only suspect first; stable for equal depth
    trace_cands = [c for _, c in sorted(trace_only, key=lambda t: -t[0])]
    report = format_report(ranked, ctx.evidence, trace_cands)
    trail.record(
        stage=stage,
        focus=tree.entry.span_id,
        instruction="summarize potential root causes",
        agent="format",
        data_summary=f"{len(ranked)} confirmed, {len(trace_cands)} trace-level",
        decision=report.root_cause,
    )
    if exhausted:
        logger.info("trace %s: search stopped after %d spans", tree.trace_id, len(assessed))
    return LocalizationResult(
        report=report,
        trail=trail,
        confirmed=ranked,
        trace_candidates=trace_cands,
        discarded=[c for cid, c in discarded.items() if cid not in confirmed],
        queue=queue,
        assessed=assessed,
        exhausted=exhausted,
        diagnostics=diagnostics,
    )
