"""Three-phase orchestration: initial reasoning, critical reflection and final review."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .engine import (
    AuditTrail,
    EngineConfig,
    TrailStep,
    localize,
    rank_candidates,
    store_query,
    summarize_children,
)
from .errors import (
    BudgetExceededError,
    MalformedToolCallError,
    NotAbnormalError,
    PreconditionError,
    SpanNotFoundError,
)
from .llm_backend import (
    DEFAULT_MAX_STEPS,
    ChatBackend,
    Conversation,
    FinalAnswer,
    ToolCall,
    render_prompt,
    step,
)
from .metrics_store import (
    DEFAULT_DELTA_MS,
    DEFAULT_N_SIGMA,
    ComponentTopology,
    MetricStore,
    load_metric_csv,
)
from .reasoner import (
    UNKNOWN,
    CandidateComponent,
    DeterministicPolicy,
    ReasoningContext,
    RootCauseReport,
    format_report,
    infer_query,
    verify_with_metrics,
)
from .trace_model import (
    DEFAULT_ABNORMAL_FACTOR,
    BaselineTable,
    Span,
    TraceTree,
    build_trace_tree,
    children,
    group_by_trace,
    is_abnormal_entry,
    load_spans,
    service_from_cmdb_id,
)

logger = logging.getLogger(__name__)

STAGES = ("S0", "S1", "Rf")


@dataclass(frozen=True)
class PipelineConfig:
    policy: str = "deterministic"
    n: float = DEFAULT_N_SIGMA
    delta: int = DEFAULT_DELTA_MS
    factor: float = DEFAULT_ABNORMAL_FACTOR
    max_assessed: int = 200
    max_reflection_steps: int = 200
    max_steps: int = DEFAULT_MAX_STEPS
    alpha: float = 0.5
    beta: float = 10.0
    seed: int = 0
    force: bool = False

    def __post_init__(self):
        if not (self.n > 0 and self.delta > 0 and self.factor > 0):
            raise ValueError("n, delta and factor must be positive")
        if self.policy not in ("deterministic", "llm"):
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.max_reflection_steps <= 0 or self.max_assessed <= 0 or self.max_steps <= 0:
            raise ValueError("step budgets must be positive")

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class StageResult:
    stage: str
    candidates: list[CandidateComponent]
    transcript: list[TrailStep]
    report: RootCauseReport | None = None
    seeds: tuple[str, ...] = ()
    exhausted: bool = False
    conversation: Conversation | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "Rf" and self.report is None:
            raise ValueError("final review must carry a report")

    @property
    def agents(self) -> list[str]:
        return [s.agent for s in self.transcript]

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage": self.stage,
            "candidates": [c.to_dict() for c in self.candidates],
            "report": self.report.to_dict() if self.report else None,
            "exhausted": self.exhausted,
        }


@dataclass
class Dataset:
    """Everything a localization run reads: spans, metrics, topology, baselines."""

    spans_by_trace: dict[str, list[Span]]
    metrics: MetricStore
    topology: ComponentTopology | None = None
    baselines: BaselineTable = field(default_factory=BaselineTable)
    _trees: dict[str, TraceTree] = field(default_factory=dict, repr=False)

    @classmethod
    def from_spans(cls, spans: Sequence[Span], metrics: MetricStore, topology=None, baselines=None) -> Dataset:
        return cls(group_by_trace(spans), metrics, topology, baselines or BaselineTable())

    @classmethod
    def load(cls, data_dir: str | Path, *, strict: bool = False) -> Dataset:
        d = Path(data_dir)
        topology = ComponentTopology.from_csv(d / "topology.csv") if (d / "topology.csv").exists() else None

        def service_of(cmdb_id: str) -> str:
            if topology is not None and cmdb_id in topology.pod_to_service:
                return topology.pod_to_service[cmdb_id]
            return service_from_cmdb_id(cmdb_id)

        trace_file = d / "traces.csv" if (d / "traces.csv").exists() else d / "traces.jsonl"
        spans = load_spans(trace_file, strict=strict, service_of=service_of) if trace_file.exists() else []
        metrics = load_metric_csv(d / "metrics.csv") if (d / "metrics.csv").exists() else MetricStore()
        baselines = (
            BaselineTable.from_csv(d / "baselines.csv") if (d / "baselines.csv").exists() else BaselineTable()
        )
        return cls.from_spans(spans, metrics, topology, baselines)

    @property
    def trace_ids(self) -> list[str]:
        return sorted(self.spans_by_trace)

    def tree(self, trace_id: str) -> TraceTree:
        if trace_id not in self._trees:
            if trace_id not in self.spans_by_trace:
                raise SpanNotFoundError(f"trace {trace_id!r} not found")
            self._trees[trace_id] = build_trace_tree(self.spans_by_trace[trace_id])
        return self._trees[trace_id]

    def is_abnormal(self, trace_id: str, factor: float = DEFAULT_ABNORMAL_FACTOR) -> bool:
        return is_abnormal_entry(self.tree(trace_id).entry, self.baselines, factor)

    def abnormal_traces(self, factor: float = DEFAULT_ABNORMAL_FACTOR) -> list[str]:
        out = []
        for tid in self.trace_ids:
            try:
                if self.is_abnormal(tid, factor):
                    out.append(tid)
            except Exception as exc:
                logger.debug("skipping trace %s: %s", tid, exc)
        return out


@dataclass
class PipelineResult:
    trace_id: str
    report: RootCauseReport
    stages: dict[str, StageResult]

    @property
    def trail(self) -> list[TrailStep]:
        return self.stages["Rf"].transcript

    def stage_report(self, stage: str) -> RootCauseReport | None:
        return self.stages[stage].report

    def to_dict(self, *, include_trail: bool = True) -> dict[str, Any]:
        d: dict[str, Any] = {
            "trace_id": self.trace_id,
            "report": self.report.to_dict(),
            "stages": {k: v.to_dict() for k, v in self.stages.items()},
        }
        if include_trail:
            d["trail"] = [s.to_dict() for s in self.trail]
        return d

    def to_json(self, **kwargs: Any) -> str:
        return json.dumps(self.to_dict(**kwargs), sort_keys=True, ensure_ascii=False)


def _dimension(topology: ComponentTopology | None, cid: str) -> str:
    kind = topology.classify(cid) if topology is not None else None
    return kind or "service"


def _union_candidates(
    tree: TraceTree, s0: StageResult, s1: StageResult
) -> tuple[list[CandidateComponent], list[CandidateComponent]]:
    """Union of both stages, split into metric-verified (strongest first) and trace-only (deepest first)."""
    pool: dict[str, CandidateComponent] = {}
    for c in [*s1.candidates, *s0.candidates]:
        old = pool.get(c.id)
        if old is None:
            pool[c.id] = c
        elif c.verified and (not old.verified or c.confirmation.peak_z > old.confirmation.peak_z):
            pool[c.id] = c
    verified = rank_candidates(c for c in pool.values() if c.verified)
    unverified = [c for c in pool.values() if not c.verified]

    def depth(c: CandidateComponent) -> int:
        return tree.depth(c.source_span) if c.source_span in tree else 0

    unverified.sort(key=lambda c: -depth(c))  # stable: S1 before S0 at equal depth
    return verified, unverified


class Coordinator:
    """Runs the three phases for one request against shared, read-only stores."""

    def __init__(
        self,
        dataset: Dataset,
        config: PipelineConfig = PipelineConfig(),
        *,
        policy: DeterministicPolicy | None = None,
        backend: ChatBackend | None = None,
    ):
        self.dataset = dataset
        self.config = config
        if config.policy == "llm" and backend is None:
            raise PreconditionError("the llm policy needs a chat backend")
        self.backend = backend
        self.policy = policy or DeterministicPolicy(dataset.baselines, alpha=config.alpha, beta=config.beta)

    @property
    def engine_config(self) -> EngineConfig:
        return EngineConfig(n=self.config.n, delta=self.config.delta, max_assessed=self.config.max_assessed)

    # ------------------------------------------------------------------ deterministic

    def initial_reasoning(self, tree: TraceTree) -> StageResult:
        """Trace-only recursion with the metric agent hidden; suspects are kept provisionally."""
        if self.config.policy == "llm":
            return self._llm_initial(tree)
        res = localize(
            tree,
            self.policy.with_shallow(True),
            None,
            self.dataset.topology,
            self.engine_config,
            verify=False,
            stage="S0",
        )
        cands = list(res.trace_candidates)
        report = res.report if cands else None
        return StageResult("S0", cands, list(res.trail), report, exhausted=res.exhausted)

    def critical_reflection(self, tree: TraceTree, s0: StageResult) -> StageResult:
        """Resume from the first-pass suspects, force one level deeper, verify with metrics."""
        if self.config.policy == "llm":
            return self._llm_reflection(tree, s0)
        seeds = tuple(dict.fromkeys(c.source_span for c in s0.candidates)) or (tree.entry.span_id,)
        start = s0.transcript[-1].step + 1 if s0.transcript else 1
        cfg = replace(self.engine_config, max_assessed=self.config.max_reflection_steps)
        res = localize(
            tree,
            self.policy.with_shallow(False),
            self.dataset.metrics,
            self.dataset.topology,
            cfg,
            seeds=list(seeds),
            forced=seeds,
            verify=True,
            stage="S1",
            step_start=start,
        )
        cands = [*res.confirmed, *[c for c in res.trace_candidates if c.id not in {x.id for x in res.confirmed}]]
        return StageResult(
            "S1",
            cands,
            [*s0.transcript, *res.trail],
            res.report,
            seeds=seeds,
            exhausted=res.exhausted,
        )

    def final_review(self, tree: TraceTree, s0: StageResult, s1: StageResult) -> StageResult:
        """Consolidate both stages; only the format agent runs here."""
        if self.config.policy == "llm":
            return self._llm_final(tree, s0, s1)
        verified, unverified = _union_candidates(tree, s0, s1)
        report = format_report(verified, [s.decision for s in s1.transcript], unverified)
        trail = AuditTrail(list(s1.transcript))
        trail.record(
            stage="Rf",
            focus=tree.entry.span_id,
            instruction="review the whole reasoning and pick the root cause",
            agent="format",
            data_summary=f"{len(verified)} verified, {len(unverified)} unverified candidates",
            decision=report.root_cause,
        )
        return StageResult("Rf", [*verified, *unverified], trail.steps, report)

    def localize_request(self, trace_id: str) -> PipelineResult:
        tree = self.dataset.tree(trace_id)
        if not self.config.force and not is_abnormal_entry(tree.entry, self.dataset.baselines, self.config.factor):
            raise NotAbnormalError(f"trace {trace_id}: entry latency within {self.config.factor}x baseline")
        s0 = self.initial_reasoning(tree)
        s1 = self.critical_reflection(tree, s0)
        rf = self.final_review(tree, s0, s1)
        return PipelineResult(trace_id, rf.report, {"S0": s0, "S1": s1, "Rf": rf})  # type: ignore[arg-type]

    # ------------------------------------------------------------------ llm

    def _entry_trace_text(self, tree: TraceTree) -> str:
        e = tree.entry
        return json.dumps(
            {
                "span_id": e.span_id,
                "timestamp": e.timestamp,
                "cmdb_id": e.cmdb_id,
                "service": e.service,
                "operation": e.operation,
                "duration": e.duration,
                "status_code": e.status_code,
            }
        )

    def _run_tool(self, tree: TraceTree, call: ToolCall, trail: AuditTrail, stage: str) -> tuple[str, Any]:
        """Execute a tool call; returns (text fed back to the model, structured payload)."""
        if call.agent == "trace":
            sid = str(call.arguments.get("span_id", ""))
            try:
                data = children(tree, sid)
            except SpanNotFoundError as exc:
                text = f"Trace Agent error: {exc}"
                trail.record(stage=stage, focus=sid, instruction="trace query", agent="trace",
                             data_summary=text, decision="error")
                return text, None
            rows = [c._asdict() for c in data]
            trail.record(stage=stage, focus=sid, instruction=f"children of {sid}", agent="trace",
                         data_summary=summarize_children(data), decision="inspected")
            return "Trace Agent result: " + json.dumps(rows), data
        if call.agent == "metric":
            comps = call.arguments.get("components") or call.arguments.get("keywords") or []
            if isinstance(comps, str):
                comps = [comps]
            ctx = ReasoningContext.for_tree(tree)
            src = tree.entry.span_id
            cands = [CandidateComponent(str(c), _dimension(self.dataset.topology, str(c)), src) for c in comps]
            if not cands:
                text = "Metrics Agent error: no components given"
                trail.record(stage=stage, focus=src, instruction="metric query", agent="metric",
                             data_summary=text, decision="error")
                return text, None
            q = infer_query(ctx, cands, self.config.delta, self.dataset.metrics.time_range())
            segs = store_query(self.dataset.metrics, self.dataset.topology, self.config.n, self.config.delta)(q, ctx.t0)
            ok, bad = verify_with_metrics(cands, segs)
            verdict = {
                "query": {"keywords": list(q.keywords), "window": list(q.window)},
                "confirmed": [{"id": c.id, "kpi": c.confirmation.kpi_name,
                               "peak_z": round(c.confirmation.peak_z, 6), "onset": c.confirmation.onset} for c in ok],
                "discarded": [c.id for c in bad],
            }
            trail.record(stage=stage, focus=src, instruction=f"metrics of {', '.join(q.keywords)}",
                         agent="metric", data_summary=f"{len(segs)} fluctuating series",
                         decision="confirmed" if ok else "discarded", metric_verdict=verdict)
            return "Metrics Agent result: " + json.dumps(verdict), ok
        if call.agent == "format":
            rc = str(call.arguments.get("root_cause") or UNKNOWN)
            report = RootCauseReport(rc, str(call.arguments.get("reason", "")))
            trail.record(stage=stage, focus=tree.entry.span_id, instruction="format result", agent="format",
                         data_summary=report.to_json(), decision=rc)
            return "Format Agent recorded the result.", report
        raise MalformedToolCallError(f"unknown agent {call.agent!r}")

    def _llm_candidates(self, tree: TraceTree, report: RootCauseReport | None, verified=(),
                        last_span: str | None = None) -> list[CandidateComponent]:
        out = list(verified)
        if report is not None and report.root_cause != UNKNOWN and report.root_cause not in {c.id for c in out}:
            out.insert(0, CandidateComponent(report.root_cause, _dimension(self.dataset.topology, report.root_cause),
                                             last_span or tree.entry.span_id))
        return out

    def _drive(self, tree, conv: Conversation, trail: AuditTrail, stage: str, phases) -> tuple[
            RootCauseReport | None, list[CandidateComponent], str | None, bool]:
        """Tool loop; ``phases`` yields the allowed agent set for each step."""
        report = None
        verified: list[CandidateComponent] = []
        last_span = None
        exhausted = False
        i = 0
        while True:
            allowed, follow_up = phases(i)
            try:
                action = step(conv, allowed, self.backend)  # type: ignore[arg-type]
            except BudgetExceededError:
                exhausted = True
                break
            except MalformedToolCallError as exc:
                trail.record(stage=stage, focus=tree.entry.span_id, instruction="model turn", agent="model",
                             data_summary=str(exc)[:200], decision="malformed output")
                exhausted = True
                break
            i += 1
            if isinstance(action, FinalAnswer):
                trail.record(stage=stage, focus=tree.entry.span_id, instruction="model answer", agent="model",
                             data_summary=action.text[:200], decision="final answer")
                break
            text, payload = self._run_tool(tree, action, trail, stage)
            if action.agent == "format":
                report = payload
                break
            if action.agent == "trace" and payload is not None:
                last_span = str(action.arguments.get("span_id"))
            if action.agent == "metric" and payload:
                verified.extend(payload)
            conv.add_user(text + (("\n" + follow_up) if follow_up else ""))
        return report, verified, last_span, exhausted

    def _llm_initial(self, tree: TraceTree) -> StageResult:
        prompt = render_prompt("initial", {"entry_trace": self._entry_trace_text(tree)})
        conv = Conversation.start(prompt, max_steps=self.config.max_steps)
        trail = AuditTrail()
        report, _, last, exhausted = self._drive(tree, conv, trail, "S0", lambda i: (("trace", "format"), ""))
        return StageResult("S0", self._llm_candidates(tree, report, (), last), trail.steps, report,
                           exhausted=exhausted, conversation=conv)

    def _llm_reflection(self, tree: TraceTree, s0: StageResult) -> StageResult:
        conv = s0.conversation or Conversation.start(
            render_prompt("initial", {"entry_trace": self._entry_trace_text(tree)}))
        conv.max_steps = conv.steps + self.config.max_reflection_steps
        conv.add_user(render_prompt("reflection_step1", {}))
        later = render_prompt("reflection_later", {})
        trail = AuditTrail(list(s0.transcript), start=s0.transcript[-1].step + 1 if s0.transcript else 1)

        def phases(i: int):
            if i == 0:
                return ("trace", "metric"), later
            return ("trace", "metric", "format"), later

        report, verified, last, exhausted = self._drive(tree, conv, trail, "S1", phases)
        verified = rank_candidates({c.id: c for c in verified}.values())
        cands = self._llm_candidates(tree, report, verified, last)
        return StageResult("S1", cands, trail.steps, report, exhausted=exhausted, conversation=conv)

    def _llm_final(self, tree: TraceTree, s0: StageResult, s1: StageResult) -> StageResult:
        think = s1.conversation.transcript() if s1.conversation else ""
        prompt = render_prompt("final_review", {"think_process": think})
        review = Conversation.start(prompt, max_steps=max(2, self.config.max_steps))
        trail = AuditTrail(list(s1.transcript))
        report, _, _, _ = self._drive(tree, review, trail, "Rf", lambda i: (("format",), ""))
        verified, unverified = _union_candidates(tree, s0, s1)
        if report is None:
            report = format_report(verified, [], unverified)
        if not any(s.stage == "Rf" and s.agent == "format" for s in trail.steps):
            trail.record(stage="Rf", focus=tree.entry.span_id, instruction="format result", agent="format",
                         data_summary=report.to_json(), decision=report.root_cause)
        pool = [*verified, *unverified]
        pool.sort(key=lambda c: c.id != report.root_cause)
        return StageResult("Rf", pool, trail.steps, report)


def localize_request(
    trace_id: str,
    stores: Dataset,
    config: PipelineConfig = PipelineConfig(),
    *,
    backend: ChatBackend | None = None,
) -> PipelineResult:
    """Run all three phases on one request and return the final report with every intermediate."""
    return Coordinator(stores, config, backend=backend).localize_request(trace_id)
