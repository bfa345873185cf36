"""Candidate assessment policies, dimensional expansion, trace-to-metric queries and report formatting."""

from __future__ import annotations

import json
import logging
import re
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field, replace
from typing import Protocol, Union

from .errors import PreconditionError
from .metrics_store import ComponentTopology, FluctuationSegment, rank_fluctuations
from .trace_model import BaselineTable, ChildInfo, Span, TraceTree

logger = logging.getLogger(__name__)

UNKNOWN = "unknown"
DIMENSIONS = ("pod", "service", "node")


# --------------------------------------------------------------------------- types


@dataclass
class ReasoningContext:
    """Mutable per-analysis state handed to the policy at every step."""

    tree: TraceTree
    focus: str
    t0: int
    visited: set[str] = field(default_factory=set)
    evidence: list[str] = field(default_factory=list)

    @classmethod
    def for_tree(cls, tree: TraceTree) -> ReasoningContext:
        return cls(tree=tree, focus=tree.entry.span_id, t0=tree.entry.timestamp)


@dataclass(frozen=True)
class PotentialRootCause:
    reason: str

    kind = "potential_root_cause"


@dataclass(frozen=True)
class Descend:
    child_ids: tuple[str, ...]

    kind = "descend"


@dataclass(frozen=True)
class DeadEnd:
    note: str = ""

    kind = "dead_end"


Decision = Union[PotentialRootCause, Descend, DeadEnd]


def describe_decision(d: Decision) -> str:
    if isinstance(d, PotentialRootCause):
        return f"potential root cause ({d.reason})"
    if isinstance(d, Descend):
        return "descend into " + ", ".join(d.child_ids)
    return "dead end" + (f" ({d.note})" if d.note else "")


@dataclass(frozen=True)
class QueryTuple:
    keywords: tuple[str, ...]
    window: tuple[int, int]

    def __post_init__(self):
        if not self.keywords:
            raise PreconditionError("query keywords must be non-empty")
        if not self.window[0] < self.window[1]:
            raise PreconditionError(f"empty query window {self.window}")


@dataclass(frozen=True)
class RootCauseReport:
    root_cause: str
    reason: str

    def to_dict(self) -> dict[str, str]:
        return {"root_cause": self.root_cause, "reason": self.reason}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> RootCauseReport:
        extra = set(d) - {"root_cause", "reason"}
        if extra or "root_cause" not in d:
            raise ValueError(f"report must carry exactly root_cause and reason, got {sorted(d)}")
        return cls(str(d["root_cause"]), str(d.get("reason", "")))


@dataclass(frozen=True)
class CandidateComponent:
    id: str
    dimension: str
    source_span: str
    confirmation: FluctuationSegment | None = None
    path: tuple[str, ...] = ()
    signal: str = ""

    def __post_init__(self):
        if self.dimension not in DIMENSIONS:
            raise ValueError(f"bad dimension {self.dimension!r}")

    @property
    def verified(self) -> bool:
        return self.confirmation is not None

    def to_dict(self) -> dict:
        d = {"id": self.id, "dimension": self.dimension, "source_span": self.source_span}
        if self.confirmation is not None:
            c = self.confirmation
            d["confirmation"] = {
                "kpi": c.kpi_name,
                "peak_z": round(c.peak_z, 6),
                "onset": c.onset,
            }
        return d


# --------------------------------------------------------------------------- policies


class Policy(Protocol):
    def instruction(self, span_id: str, ctx: ReasoningContext) -> str: ...

    def decide(self, span_id: str, data: Sequence[ChildInfo], ctx: ReasoningContext) -> Decision: ...


@dataclass(frozen=True)
class DeterministicPolicy:
    """Rule-based stand-in for the recursion agent.

    A child is suspicious when it failed, when it accounts for at least
    ``alpha`` of its parent's latency, or when it runs more than ``beta`` times
    its own operation baseline. With ``shallow`` set the policy stops at the
    first suspicious span that leaves the entry's pod, mimicking the quick
    judgment of a first pass.
    """

    baselines: BaselineTable | None = None
    alpha: float = 0.5
    beta: float = 10.0
    shallow: bool = False

    def with_shallow(self, shallow: bool) -> DeterministicPolicy:
        return replace(self, shallow=shallow)

    def _over_baseline(self, service: str, operation: str, duration: int) -> bool:
        if self.baselines is None:
            return False
        mean = self.baselines.get_mean(service, operation)
        return mean is not None and duration > self.beta * mean

    def suspicious_child(self, child: ChildInfo, parent: Span) -> bool:
        if child.status_code != 0:
            return True
        if parent.duration > 0 and child.duration >= self.alpha * parent.duration:
            return True
        return self._over_baseline(child.service, child.operation, child.duration)

    def suspicious_span(self, span: Span) -> bool:
        return span.status_code != 0 or self._over_baseline(span.service, span.operation, span.duration)

    def instruction(self, span_id: str, ctx: ReasoningContext) -> str:
        s = ctx.tree.span(span_id)
        return f"inspect children of {span_id} ({s.cmdb_id} {s.operation}) for errors or latency"

    def decide(self, span_id: str, data: Sequence[ChildInfo], ctx: ReasoningContext) -> Decision:
        span = ctx.tree.span(span_id)
        entry = ctx.tree.entry
        if (
            self.shallow
            and span_id != entry.span_id
            and span.cmdb_id != entry.cmdb_id
            and self.suspicious_span(span)
        ):
            return PotentialRootCause(f"first anomalous hop off the entry pod: {trace_signal(span, self.baselines)}")
        bad = [c for c in data if self.suspicious_child(c, span)]
        if bad:
            bad.sort(key=lambda c: (c.status_code == 0, -c.duration, c.span_id))
            return Descend(tuple(c.span_id for c in bad))
        if self.suspicious_span(span):
            return PotentialRootCause(f"no suspicious children; {trace_signal(span, self.baselines)}")
        return DeadEnd("children and span within normal behaviour")


def trace_signal(span: Span, baselines: BaselineTable | None = None) -> str:
    parts = []
    if span.status_code != 0:
        parts.append(f"status_code={span.status_code}")
    text = f"duration={span.duration}us"
    if baselines is not None:
        mean = baselines.get_mean(span.service, span.operation)
        if mean:
            text += f" ({span.duration / mean:.1f}x baseline)"
    parts.append(text)
    return ", ".join(parts)


def assess_candidate(
    policy: Policy, span_id: str, data: Sequence[ChildInfo], ctx: ReasoningContext
) -> Decision:
    """Run one policy step on ``span_id``; the instruction is appended to ``ctx.evidence``."""
    ctx.focus = span_id
    ctx.visited.add(span_id)
    try:
        ctx.evidence.append(policy.instruction(span_id, ctx))
        decision = policy.decide(span_id, data, ctx)
    except Exception as exc:  # policy failures must not abort the search
        logger.warning("policy failed on %s: %s", span_id, exc)
        ctx.evidence.append(f"policy failure on {span_id}: {exc}")
        return DeadEnd(f"policy failure: {exc}")
    if isinstance(decision, Descend):
        allowed = {c.span_id for c in data}
        kept = tuple(dict.fromkeys(c for c in decision.child_ids if c in allowed))
        if len(kept) != len(decision.child_ids):
            ctx.evidence.append(f"ignored non-child targets of {span_id}")
        decision = Descend(kept) if kept else DeadEnd("no valid child targets")
    return decision


# --------------------------------------------------------------------------- expansion


def expand_dimensions(
    c: CandidateComponent,
    topology: ComponentTopology | None,
    *,
    diagnostics: list[str] | None = None,
) -> list[CandidateComponent]:
    """Widen a pod-level suspect to (pod, owning service, hosting node)."""
    if c.dimension != "pod":
        raise PreconditionError(f"expand_dimensions needs a pod candidate, got {c.dimension}")
    out = [c]
    if topology is None or c.id not in topology.pod_to_service:
        if diagnostics is not None:
            diagnostics.append(f"pod {c.id} not in topology")
        return out
    out.append(replace(c, id=topology.pod_to_service[c.id], dimension="service", confirmation=None))
    node = topology.pod_to_node.get(c.id)
    if node is None:
        if diagnostics is not None:
            diagnostics.append(f"no node mapping for {c.id}")
    else:
        out.append(replace(c, id=node, dimension="node", confirmation=None))
    return out


_RPC_SERVICE = re.compile(r"(?:^|\.)(?P<svc>[A-Za-z]+Service)/")


def callee_service(operation: str, topology: ComponentTopology | None) -> str | None:
    """Service named by an RPC operation such as ``hipstershop.ProductCatalogService/ListProducts``."""
    m = _RPC_SERVICE.search(operation)
    if not m or topology is None:
        return None
    name = m.group("svc").lower()
    return name if name in topology.service_to_pods else None


def path_label(tree: TraceTree, span_id: str) -> tuple[str, ...]:
    hops: list[str] = []
    for s in tree.path_to(span_id):
        if not hops or hops[-1] != s.cmdb_id:
            hops.append(s.cmdb_id)
    return tuple(hops)


def candidates_for_span(
    tree: TraceTree,
    span_id: str,
    topology: ComponentTopology | None,
    baselines: BaselineTable | None = None,
    *,
    diagnostics: list[str] | None = None,
) -> list[CandidateComponent]:
    """Pods along the entry-to-span path, each widened to service and node.

    The deepest pod comes first. A service named by the span's RPC operation is
    added when it differs from the span's own service.
    """
    path = tree.path_to(span_id)
    span = path[-1]
    hops = path_label(tree, span_id)
    signal = trace_signal(span, baselines)
    out: dict[str, CandidateComponent] = {}
    seen_pods = []
    for s in reversed(path):
        if s.cmdb_id in seen_pods:
            continue
        seen_pods.append(s.cmdb_id)
        base = CandidateComponent(s.cmdb_id, "pod", span_id, path=hops, signal=signal)
        expanded = expand_dimensions(base, topology, diagnostics=diagnostics)
        if len(expanded) == 1 and s.service != s.cmdb_id:
            expanded.append(replace(base, id=s.service, dimension="service"))
        for cand in expanded:
            out.setdefault(cand.id, cand)
    callee = callee_service(span.operation, topology)
    if callee is not None and callee not in out:
        out[callee] = CandidateComponent(callee, "service", span_id, path=hops, signal=signal)
    return list(out.values())


def infer_query(
    ctx: ReasoningContext,
    candidates: Iterable[CandidateComponent],
    delta: int,
    data_range: tuple[int, int] | None = None,
) -> QueryTuple:
    """Keywords are the candidate ids; the window is ``t0 +- delta`` clamped to the data."""
    keywords = tuple(dict.fromkeys(c.id for c in candidates))
    if not keywords:
        raise PreconditionError("infer_query needs at least one candidate")
    start, end = ctx.t0 - delta, ctx.t0 + delta
    if data_range is not None:
        lo, hi = max(start, data_range[0]), min(end, data_range[1])
        if lo < hi:
            start, end = lo, hi
    return QueryTuple(keywords, (start, end))


def verify_with_metrics(
    candidates: Iterable[CandidateComponent], segments: Iterable[FluctuationSegment]
) -> tuple[list[CandidateComponent], list[CandidateComponent]]:
    """Split candidates by whether a fluctuation was observed on their own id.

    Confirmed candidates carry their strongest segment and are ordered by it.
    """
    by_comp: dict[str, list[FluctuationSegment]] = {}
    for seg in segments:
        by_comp.setdefault(seg.component_id, []).append(seg)
    confirmed, discarded = [], []
    for c in candidates:
        segs = by_comp.get(c.id)
        if segs:
            confirmed.append(replace(c, confirmation=rank_fluctuations(segs)[0]))
        else:
            discarded.append(c)
    order = {id(s): i for i, s in enumerate(rank_fluctuations([c.confirmation for c in confirmed]))}
    confirmed.sort(key=lambda c: order[id(c.confirmation)])
    return confirmed, discarded


def format_report(
    confirmed: Sequence[CandidateComponent],
    evidence: Sequence[str] = (),
    trace_candidates: Sequence[CandidateComponent] = (),
) -> RootCauseReport:
    """Condense the search into the two-field report.

    Falls back to the first trace-only candidate (marked unverified) and then
    to ``"unknown"``.
    """
    if confirmed:
        head = confirmed[0]
        seg = head.confirmation
        metric = f"{seg.kpi_name} peak z={seg.peak_z:.2f} onset={seg.onset}" if seg else "none"
        others = [c.id for c in confirmed[1:]]
        reason = _reason(head, metric)
        if others:
            reason += f"; weaker fluctuations: {', '.join(others)}"
        return RootCauseReport(head.id, reason)
    if trace_candidates:
        head = trace_candidates[0]
        return RootCauseReport(head.id, _reason(head, "none (unverified by metrics)"))
    note = f"; last step: {evidence[-1]}" if evidence else ""
    return RootCauseReport(UNKNOWN, "no suspicious span or metric fluctuation found" + note)


def _reason(c: CandidateComponent, metric: str) -> str:
    hops = list(c.path)
    if not hops or hops[-1] != c.id:
        hops.append(c.id)
    return f"path: {' -> '.join(hops)}; trace signal: {c.signal or 'n/a'}; metric signal: {metric}"
