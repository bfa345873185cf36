"""Span records, per-request call trees and the child-span retrieval used by the trace agent."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from collections import defaultdict
from collections.abc import Callable, Iterable, Iterator, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, NamedTuple

from .errors import (
    BaselineUnavailableError,
    MalformedTraceError,
    RecordParseError,
    SpanNotFoundError,
)

logger = logging.getLogger(__name__)

TRACE_FIELDS = (
    "timestamp",
    "cmdb_id",
    "span_id",
    "trace_id",
    "duration",
    "type",
    "status_code",
    "operation_name",
    "parent_span",
)
BASELINE_FIELDS = ("service", "operation", "mean_latency_us", "sample_count")

DEFAULT_ABNORMAL_FACTOR = 100.0

_POD_NAME = re.compile(r"^(?P<service>[A-Za-z_]+?)\d*-\d+$")


@dataclass(frozen=True)
class Span:
    trace_id: str
    span_id: str
    parent_span_id: str | None
    timestamp: int  # epoch ms
    cmdb_id: str
    service: str
    operation: str
    duration: int  # microseconds
    status_code: int = 0
    type: str = ""

    @property
    def is_error(self) -> bool:
        return self.status_code != 0


class ChildInfo(NamedTuple):
    """One element of the trace agent's answer for a span: a child and its metadata."""

    timestamp: int
    span_id: str
    service: str
    operation: str
    duration: int
    status_code: int


def service_from_cmdb_id(cmdb_id: str) -> str:
    """Derive the owning service from a pod name such as ``recommendationservice2-0``.

    Names that do not look like pods are returned unchanged.
    """
    m = _POD_NAME.match(cmdb_id)
    return m.group("service") if m else cmdb_id


# --------------------------------------------------------------------------- parsing


def _required(rec: Mapping[str, Any], key: str) -> Any:
    if key not in rec:
        raise ValueError(f"missing field {key!r}")
    return rec[key]


def _as_int(value: Any, name: str) -> int:
    if isinstance(value, bool):
        raise ValueError(f"{name} must be an integer, got {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not value.is_integer():
            raise ValueError(f"{name} must be an integer, got {value!r}")
        return int(value)
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            raise ValueError(f"{name} is not numeric: {value!r}") from None
        if not f.is_integer():
            raise ValueError(f"{name} must be an integer, got {value!r}") from None
        return int(f)


def record_to_span(rec: Mapping[str, Any], service_of: Callable[[str], str] | None = None) -> Span:
    """Decode one raw record. Raises ``ValueError`` on a bad field."""
    service_of = service_of or service_from_cmdb_id
    cmdb_id = str(_required(rec, "cmdb_id"))
    span_id = str(_required(rec, "span_id"))
    trace_id = str(_required(rec, "trace_id"))
    if not span_id or not trace_id or not cmdb_id:
        raise ValueError("span_id, trace_id and cmdb_id must be non-empty")
    duration = _as_int(_required(rec, "duration"), "duration")
    if duration < 0:
        raise ValueError(f"negative duration {duration}")
    parent = rec.get("parent_span")
    parent = None if parent is None or str(parent).strip() == "" else str(parent)
    return Span(
        trace_id=trace_id,
        span_id=span_id,
        parent_span_id=parent,
        timestamp=_as_int(_required(rec, "timestamp"), "timestamp"),
        cmdb_id=cmdb_id,
        service=service_of(cmdb_id),
        operation=str(_required(rec, "operation_name")),
        duration=duration,
        status_code=_as_int(_required(rec, "status_code"), "status_code"),
        type=str(rec.get("type") or ""),
    )


def parse_trace_records(
    records: Iterable[Mapping[str, Any]],
    *,
    strict: bool = True,
    service_of: Callable[[str], str] | None = None,
    errors: list[RecordParseError] | None = None,
) -> list[Span]:
    """Decode raw trace records into spans, preserving input order.

    In strict mode the first bad record raises :class:`RecordParseError`.
    In lenient mode bad records are skipped; pass ``errors`` to collect them.
    """
    spans: list[Span] = []
    for i, rec in enumerate(records):
        try:
            spans.append(record_to_span(rec, service_of))
        except (ValueError, TypeError) as exc:
            err = RecordParseError(i, str(exc))
            if strict:
                raise err from exc
            logger.debug("skipping %s", err)
            if errors is not None:
                errors.append(err)
    return spans


def span_to_record(span: Span) -> dict[str, str]:
    return {
        "timestamp": str(span.timestamp),
        "cmdb_id": span.cmdb_id,
        "span_id": span.span_id,
        "trace_id": span.trace_id,
        "duration": str(span.duration),
        "type": span.type,
        "status_code": str(span.status_code),
        "operation_name": span.operation,
        "parent_span": span.parent_span_id or "",
    }


def read_trace_records(path: str | Path) -> Iterator[dict[str, Any]]:
    """Yield raw records from a CSV (header required) or JSON-lines file."""
    path = Path(path)
    with path.open(newline="") as fh:
        if path.suffix in (".jsonl", ".ndjson", ".json"):
            for line in fh:
                line = line.strip()
                if line:
                    yield json.loads(line)
        else:
            reader = csv.DictReader(fh)
            missing = set(TRACE_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise MalformedTraceError(f"{path}: missing columns {sorted(missing)}")
            yield from reader


def load_spans(path: str | Path, **kwargs: Any) -> list[Span]:
    return parse_trace_records(read_trace_records(path), **kwargs)


def write_trace_csv(spans: Iterable[Span], path_or_buf: str | Path | io.TextIOBase) -> None:
    def _write(fh):
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for s in spans:
            w.writerow(span_to_record(s))

    if isinstance(path_or_buf, (str, Path)):
        with open(path_or_buf, "w", newline="") as fh:
            _write(fh)
    else:
        _write(path_or_buf)


def write_trace_jsonl(spans: Iterable[Span], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in spans:
            fh.write(json.dumps(span_to_record(s)) + "\n")


def group_by_trace(spans: Iterable[Span]) -> dict[str, list[Span]]:
    out: dict[str, list[Span]] = defaultdict(list)
    for s in spans:
        out[s.trace_id].append(s)
    return dict(out)


# --------------------------------------------------------------------------- trees


def _child_key(s: Span) -> tuple[int, str]:
    return (s.timestamp, s.span_id)


@dataclass(frozen=True)
class TraceTree:
    """Immutable call tree of one request."""

    trace_id: str
    entry: Span
    adjacency: Mapping[str, tuple[Span, ...]]
    spans: Mapping[str, Span] = field(repr=False)
    orphans: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.spans)

    def __contains__(self, span_id: object) -> bool:
        return span_id in self.spans

    def __iter__(self) -> Iterator[Span]:
        return iter(self.spans.values())

    def span(self, span_id: str) -> Span:
        try:
            return self.spans[span_id]
        except KeyError:
            raise SpanNotFoundError(f"span {span_id!r} not in trace {self.trace_id}") from None

    def child_spans(self, span_id: str) -> tuple[Span, ...]:
        if span_id not in self.spans:
            raise SpanNotFoundError(f"span {span_id!r} not in trace {self.trace_id}")
        return self.adjacency.get(span_id, ())

    def parent(self, span_id: str) -> Span | None:
        s = self.span(span_id)
        if s.span_id == self.entry.span_id:
            return None
        if s.span_id in self.orphans:
            return self.entry
        return self.spans[s.parent_span_id]  # type: ignore[index]

    def path_to(self, span_id: str) -> list[Span]:
        """Spans from the entry down to ``span_id`` inclusive."""
        path = [self.span(span_id)]
        while (p := self.parent(path[-1].span_id)) is not None:
            path.append(p)
        return path[::-1]

    def depth(self, span_id: str) -> int:
        """Edges between the entry and ``span_id``; the entry has depth 0."""
        return len(self.path_to(span_id)) - 1

    def max_depth(self) -> int:
        best, stack = 0, [(self.entry.span_id, 0)]
        while stack:
            sid, d = stack.pop()
            best = max(best, d)
            stack.extend((c.span_id, d + 1) for c in self.adjacency.get(sid, ()))
        return best


def build_trace_tree(spans: Iterable[Span], *, strict: bool = False) -> TraceTree:
    """Assemble the call tree of one trace.

    Orphans (parent id absent from the trace) are attached under the entry and
    listed in ``tree.orphans`` unless ``strict`` is set, in which case they are
    rejected.
    """
    spans = list(spans)
    if not spans:
        raise MalformedTraceError("empty trace")
    trace_ids = {s.trace_id for s in spans}
    if len(trace_ids) != 1:
        raise MalformedTraceError(f"spans from several traces: {sorted(trace_ids)}")
    trace_id = trace_ids.pop()

    by_id: dict[str, Span] = {}
    for s in spans:
        if s.span_id in by_id:
            raise MalformedTraceError(f"duplicate span_id {s.span_id!r} in trace {trace_id}")
        by_id[s.span_id] = s

    roots = [s for s in spans if s.parent_span_id is None]
    if len(roots) != 1:
        raise MalformedTraceError(
            f"trace {trace_id} has {len(roots)} entry spans, expected exactly one"
        )
    entry = roots[0]

    adjacency: dict[str, list[Span]] = defaultdict(list)
    orphans = []
    for s in spans:
        if s is entry:
            continue
        if s.parent_span_id == s.span_id:
            raise MalformedTraceError(f"span {s.span_id!r} is its own parent")
        if s.parent_span_id not in by_id:
            if strict:
                raise MalformedTraceError(
                    f"orphan span {s.span_id!r}: parent {s.parent_span_id!r} missing"
                )
            orphans.append(s.span_id)
            adjacency[entry.span_id].append(s)
        else:
            adjacency[s.parent_span_id].append(s)

    # everything must hang off the entry; anything else sits on a cycle
    seen = {entry.span_id}
    stack = [entry.span_id]
    while stack:
        for c in adjacency.get(stack.pop(), ()):
            seen.add(c.span_id)
            stack.append(c.span_id)
    if len(seen) != len(by_id):
        raise MalformedTraceError(f"trace {trace_id} contains a parent cycle")

    if orphans:
        logger.info("trace %s: %d orphan span(s) attached under entry", trace_id, len(orphans))

    frozen = {k: tuple(sorted(v, key=_child_key)) for k, v in adjacency.items()}
    return TraceTree(
        trace_id=trace_id,
        entry=entry,
        adjacency=MappingProxyType(frozen),
        spans=MappingProxyType(by_id),
        orphans=tuple(orphans),
    )


def children(tree: TraceTree, span_id: str) -> tuple[ChildInfo, ...]:
    """Child spans of ``span_id`` with their metadata, ordered by (timestamp, span_id)."""
    return tuple(
        ChildInfo(c.timestamp, c.span_id, c.service, c.operation, c.duration, c.status_code)
        for c in tree.child_spans(span_id)
    )


# --------------------------------------------------------------------------- baselines


@dataclass(frozen=True)
class OperationBaseline:
    key: tuple[str, str]
    mean_latency: float  # microseconds
    sample_count: int

    def __post_init__(self):
        if self.sample_count < 0:
            raise ValueError("sample_count must be non-negative")
        if self.sample_count > 0 and not self.mean_latency > 0:
            raise ValueError(f"baseline {self.key}: mean_latency must be positive")


class BaselineTable(Mapping[tuple[str, str], OperationBaseline]):
    """Normal-period mean latency per (service, operation).

    Lookups for unknown operations fall back to the sample-weighted global mean
    unless ``fallback`` is disabled.
    """

    def __init__(self, baselines: Iterable[OperationBaseline] = (), *, fallback: bool = True):
        self._table = {b.key: b for b in baselines}
        self.fallback = fallback
        total = sum(b.sample_count for b in self._table.values())
        if total:
            mean = sum(b.mean_latency * b.sample_count for b in self._table.values()) / total
            self._global: OperationBaseline | None = OperationBaseline(("*", "*"), mean, total)
        else:
            self._global = None

    def __getitem__(self, key: tuple[str, str]) -> OperationBaseline:
        return self._table[key]

    def __iter__(self):
        return iter(self._table)

    def __len__(self) -> int:
        return len(self._table)

    @property
    def global_baseline(self) -> OperationBaseline | None:
        return self._global

    def lookup(self, service: str, operation: str) -> OperationBaseline:
        b = self._table.get((service, operation))
        if b is not None and b.sample_count > 0:
            return b
        if self.fallback and self._global is not None:
            return self._global
        raise BaselineUnavailableError(f"no baseline for {service}/{operation}")

    def get_mean(self, service: str, operation: str) -> float | None:
        try:
            return self.lookup(service, operation).mean_latency
        except BaselineUnavailableError:
            return None

    @classmethod
    def from_spans(
        cls,
        spans: Iterable[Span],
        normal_period: tuple[int, int] | None = None,
        *,
        fallback: bool = True,
    ) -> BaselineTable:
        """Mean latency per operation over spans whose timestamp lies in ``normal_period``."""
        sums: dict[tuple[str, str], list[float]] = defaultdict(lambda: [0.0, 0])
        for s in spans:
            if normal_period and not (normal_period[0] <= s.timestamp < normal_period[1]):
                continue
            acc = sums[(s.service, s.operation)]
            acc[0] += s.duration
            acc[1] += 1
        rows = [
            OperationBaseline(k, max(total / n, 1e-9), n) for k, (total, n) in sorted(sums.items())
        ]
        return cls(rows, fallback=fallback)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(BASELINE_FIELDS)
            for (svc, op), b in sorted(self._table.items()):
                w.writerow([svc, op, repr(float(b.mean_latency)), b.sample_count])

    @classmethod
    def from_csv(cls, path: str | Path, *, fallback: bool = True) -> BaselineTable:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(BASELINE_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            rows = [
                OperationBaseline(
                    (r["service"], r["operation"]),
                    float(r["mean_latency_us"]),
                    int(r["sample_count"]),
                )
                for r in reader
            ]
        return cls(rows, fallback=fallback)


def is_abnormal_entry(
    entry: Span,
    baseline: OperationBaseline | BaselineTable | None,
    factor: float = DEFAULT_ABNORMAL_FACTOR,
) -> bool:
    """True when the request's latency exceeds ``factor`` times its normal mean."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    if isinstance(baseline, BaselineTable):
        baseline = baseline.lookup(entry.service, entry.operation)
    if baseline is None or baseline.sample_count <= 0:
        raise BaselineUnavailableError(f"no baseline for {entry.service}/{entry.operation}")
    return entry.duration > factor * baseline.mean_latency
