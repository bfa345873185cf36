"""KPI series storage, component topology and the n-sigma fluctuation query of the metric agent."""

from __future__ import annotations

import csv
import logging
import math
import threading
from collections import defaultdict
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import InsufficientHistoryError, RecordParseError

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("timestamp", "cmdb_id", "kpi_name", "value")
TOPOLOGY_FIELDS = ("pod", "service", "node")

DEFAULT_N_SIGMA = 3.0
DEFAULT_DELTA_MS = 300_000
DEFAULT_REFERENCE_MS = 3_600_000
STD_FLOOR = 1e-9


@dataclass(frozen=True, eq=False)
class MetricSeries:
    component_id: str
    kpi_name: str
    timestamps: np.ndarray  # int64 epoch ms, strictly increasing
    values: np.ndarray  # float64

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.int64)
        vs = np.asarray(self.values, dtype=np.float64)
        if ts.shape != vs.shape or ts.ndim != 1:
            raise ValueError("timestamps and values must be 1-d and equally long")
        if ts.size > 1 and not np.all(np.diff(ts) > 0):
            raise ValueError(f"{self.component_id}/{self.kpi_name}: timestamps not increasing")
        ts.setflags(write=False)
        vs.setflags(write=False)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "values", vs)

    def __len__(self) -> int:
        return int(self.timestamps.size)

    @property
    def key(self) -> tuple[str, str]:
        return (self.component_id, self.kpi_name)

    @property
    def points(self) -> list[tuple[int, float]]:
        return list(zip(self.timestamps.tolist(), self.values.tolist()))

    def between(self, start: int, end: int, *, closed: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Points with ``start <= t < end`` (``<= end`` when ``closed``)."""
        lo = np.searchsorted(self.timestamps, start, side="left")
        hi = np.searchsorted(self.timestamps, end, side="right" if closed else "left")
        return self.timestamps[lo:hi], self.values[lo:hi]


@dataclass(frozen=True)
class MetricStats:
    mean: float
    stddev: float
    reference_window: tuple[int, int]

    def z(self, value: float) -> float:
        return abs(value - self.mean) / self.stddev


@dataclass(frozen=True)
class FluctuationSegment:
    component_id: str
    kpi_name: str
    window_points: tuple[tuple[int, float], ...]
    peak_z: float
    onset: int
    stats: MetricStats = field(compare=False)
    n: float = DEFAULT_N_SIGMA

    def recheck(self) -> bool:
        """Re-evaluate the n-sigma predicate on the stored points."""
        return any(
            abs(v - self.stats.mean) > self.n * self.stats.stddev for _, v in self.window_points
        )


class ComponentSet(frozenset):
    """Set of component ids; ``known`` is False when the query id was not in the topology."""

    known: bool

    def __new__(cls, items: Iterable[str] = (), known: bool = True):
        obj = super().__new__(cls, items)
        obj.known = known
        return obj


@dataclass(frozen=True)
class ComponentTopology:
    pod_to_service: Mapping[str, str]
    pod_to_node: Mapping[str, str]
    service_to_pods: Mapping[str, tuple[str, ...]]

    def __post_init__(self):
        for svc, pods in self.service_to_pods.items():
            for p in pods:
                if self.pod_to_service.get(p) != svc:
                    raise ValueError(f"topology mismatch: {p} listed under {svc}")
        for p, svc in self.pod_to_service.items():
            if p not in self.service_to_pods.get(svc, ()):
                raise ValueError(f"topology mismatch: {p} missing from {svc}")

    @classmethod
    def from_rows(cls, rows: Iterable[tuple[str, str, str | None]]) -> ComponentTopology:
        p2s: dict[str, str] = {}
        p2n: dict[str, str] = {}
        s2p: dict[str, list[str]] = defaultdict(list)
        for pod, svc, node in rows:
            p2s[pod] = svc
            if node:
                p2n[pod] = node
            if pod not in s2p[svc]:
                s2p[svc].append(pod)
        return cls(p2s, p2n, {s: tuple(sorted(p)) for s, p in s2p.items()})

    @property
    def pods(self) -> frozenset[str]:
        return frozenset(self.pod_to_service)

    @property
    def services(self) -> frozenset[str]:
        return frozenset(self.service_to_pods)

    @property
    def nodes(self) -> frozenset[str]:
        return frozenset(self.pod_to_node.values())

    def classify(self, component_id: str) -> str | None:
        if component_id in self.pod_to_service:
            return "pod"
        if component_id in self.service_to_pods:
            return "service"
        if component_id in self.nodes:
            return "node"
        return None

    def rows(self) -> list[tuple[str, str, str]]:
        return [(p, s, self.pod_to_node.get(p, "")) for p, s in sorted(self.pod_to_service.items())]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TOPOLOGY_FIELDS)
            w.writerows(self.rows())

    @classmethod
    def from_csv(cls, path: str | Path) -> ComponentTopology:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = set(TOPOLOGY_FIELDS) - set(reader.fieldnames or ())
            if missing:
                raise ValueError(f"{path}: missing columns {sorted(missing)}")
            return cls.from_rows((r["pod"], r["service"], r["node"] or None) for r in reader)


def related_components(c: str, topology: ComponentTopology) -> ComponentSet:
    """Components whose metrics bear on ``c``: a pod brings its service and node,
    a service brings its pods, a node stands alone."""
    kind = topology.classify(c)
    if kind == "pod":
        out = {c, topology.pod_to_service[c]}
        if c in topology.pod_to_node:
            out.add(topology.pod_to_node[c])
        return ComponentSet(out)
    if kind == "service":
        return ComponentSet({c, *topology.service_to_pods[c]})
    if kind == "node":
        return ComponentSet({c})
    logger.debug("component %r not in topology", c)
    return ComponentSet({c}, known=False)


def historical_stats(series: MetricSeries, reference_window: tuple[int, int]) -> MetricStats:
    """Population mean/std of the points with ``start <= t < end``."""
    start, end = reference_window
    _, vals = series.between(start, end)
    if vals.size < 2:
        raise InsufficientHistoryError(
            f"{series.component_id}/{series.kpi_name}: {vals.size} point(s) in {reference_window}"
        )
    mean = float(vals.mean())
    std = float(vals.std())
    # a constant series must not divide by zero; floor scales with the level
    std = max(std, STD_FLOOR * max(1.0, abs(mean)))
    return MetricStats(mean, std, (start, end))


def n_sigma_anomalous(
    series: MetricSeries, stats: MetricStats, t0: int, delta: int, n: float = DEFAULT_N_SIGMA
) -> bool:
    _, vals = series.between(t0 - delta, t0 + delta, closed=True)
    if vals.size == 0:
        return False
    return bool(np.any(np.abs(vals - stats.mean) > n * stats.stddev))


def _segment(
    series: MetricSeries, stats: MetricStats, start: int, end: int, n: float
) -> FluctuationSegment | None:
    ts, vals = series.between(start, end, closed=True)
    if vals.size == 0:
        return None
    dev = np.abs(vals - stats.mean)
    hit = dev > n * stats.stddev
    if not hit.any():
        return None
    return FluctuationSegment(
        component_id=series.component_id,
        kpi_name=series.kpi_name,
        window_points=tuple(zip(ts.tolist(), vals.tolist())),
        peak_z=float(dev.max() / stats.stddev),
        onset=int(ts[np.argmax(hit)]),
        stats=stats,
        n=n,
    )


def rank_fluctuations(segments: Iterable[FluctuationSegment]) -> list[FluctuationSegment]:
    """Most significant first; earlier onset, then component id, break ties."""
    return sorted(segments, key=lambda s: (-s.peak_z, s.onset, s.component_id, s.kpi_name))


class MetricStore:
    """Read-only collection of KPI series keyed by (component_id, kpi_name)."""

    def __init__(
        self,
        series: Iterable[MetricSeries] = (),
        *,
        reference_ms: int = DEFAULT_REFERENCE_MS,
    ):
        self._series: dict[tuple[str, str], MetricSeries] = {}
        self._by_component: dict[str, list[MetricSeries]] = defaultdict(list)
        for s in series:
            self._series[s.key] = s
        for key in sorted(self._series):
            self._by_component[key[0]].append(self._series[key])
        self.reference_ms = reference_ms
        self._stats_cache: dict[tuple[str, str, int, int], MetricStats | None] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._series)

    def __iter__(self):
        return iter(self._series.values())

    def __contains__(self, key: object) -> bool:
        return key in self._series

    def series(self, component_id: str, kpi_name: str) -> MetricSeries:
        return self._series[(component_id, kpi_name)]

    def for_component(self, component_id: str) -> list[MetricSeries]:
        return list(self._by_component.get(component_id, ()))

    @property
    def components(self) -> list[str]:
        return sorted(self._by_component)

    def time_range(self) -> tuple[int, int] | None:
        if not self._series:
            return None
        lo = min(int(s.timestamps[0]) for s in self._series.values() if len(s))
        hi = max(int(s.timestamps[-1]) for s in self._series.values() if len(s))
        return lo, hi

    def reference_window(self, t0: int, delta: int) -> tuple[int, int]:
        end = t0 - delta
        return end - self.reference_ms, end

    def stats(self, series: MetricSeries, window: tuple[int, int]) -> MetricStats | None:
        """Memoized :func:`historical_stats`; None when history is insufficient."""
        key = (series.component_id, series.kpi_name, window[0], window[1])
        with self._lock:
            if key in self._stats_cache:
                return self._stats_cache[key]
        try:
            st: MetricStats | None = historical_stats(series, window)
        except InsufficientHistoryError:
            st = None
        with self._lock:
            self._stats_cache[key] = st
        return st

    def query_fluctuations(
        self,
        t0: int,
        delta: int,
        c: str,
        n: float = DEFAULT_N_SIGMA,
        topology: ComponentTopology | None = None,
        *,
        diagnostics: list[str] | None = None,
    ) -> list[FluctuationSegment]:
        """Fluctuating series of ``c`` and its related components around ``t0``."""
        comps = related_components(c, topology) if topology is not None else ComponentSet({c})
        if not comps.known and diagnostics is not None:
            diagnostics.append(f"unknown component {c}")
        window = self.reference_window(t0, delta)
        out = []
        for comp in sorted(comps):
            for s in self._by_component.get(comp, ()):
                st = self.stats(s, window)
                if st is None:
                    if diagnostics is not None:
                        diagnostics.append(f"insufficient history for {s.component_id}/{s.kpi_name}")
                    continue
                seg = _segment(s, st, t0 - delta, t0 + delta, n)
                if seg is not None:
                    out.append(seg)
        return out

    # ------------------------------------------------------------------ io

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            for key in sorted(self._series):
                s = self._series[key]
                for t, v in zip(s.timestamps.tolist(), s.values.tolist()):
                    w.writerow([t, s.component_id, s.kpi_name, repr(v)])


def _parse_value(v: Any) -> float:
    if isinstance(v, bool):
        raise ValueError(f"non-numeric value {v!r}")
    f = float(v)
    if math.isnan(f):
        raise ValueError("value is NaN")
    return f


def ingest_metric_records(
    records: Iterable[Mapping[str, Any]],
    *,
    strict: bool = True,
    errors: list[RecordParseError] | None = None,
    reference_ms: int = DEFAULT_REFERENCE_MS,
) -> MetricStore:
    """Group raw KPI records into sorted series; duplicate timestamps keep the later record."""
    points: dict[tuple[str, str], dict[int, float]] = defaultdict(dict)
    for i, rec in enumerate(records):
        try:
            ts = int(float(rec["timestamp"]))
            comp = str(rec["cmdb_id"])
            kpi = str(rec["kpi_name"])
            val = _parse_value(rec["value"])
        except (KeyError, ValueError, TypeError) as exc:
            err = RecordParseError(i, str(exc))
            if strict:
                raise err from exc
            if errors is not None:
                errors.append(err)
            continue
        points[(comp, kpi)][ts] = val
    series = []
    for (comp, kpi), pts in points.items():
        ts = sorted(pts)
        series.append(MetricSeries(comp, kpi, np.array(ts, dtype=np.int64), np.array([pts[t] for t in ts])))
    return MetricStore(series, reference_ms=reference_ms)


def load_metric_csv(path: str | Path, **kwargs: Any) -> MetricStore:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(METRIC_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        return ingest_metric_records(reader, **kwargs)
