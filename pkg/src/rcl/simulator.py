"""Seeded microservice simulator: traces, KPI series and fault labels for end-to-end checks."""

from __future__ import annotations

import csv
import hashlib
import json
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import SpecError
from .metrics_store import ComponentTopology, MetricSeries, MetricStore
from .trace_model import (
    DEFAULT_ABNORMAL_FACTOR,
    BaselineTable,
    Span,
    is_abnormal_entry,
    write_trace_csv,
)

MINUTE = 60_000
KPIS = ("cpu", "memory", "network_rx", "network_tx")
FAULT_KINDS = ("latency", "error", "network")
KIND_KPIS = {
    "latency": ("cpu", "memory"),
    "error": ("cpu",),
    "network": ("network_rx", "network_tx"),
}
KPI_LEVELS = {"cpu": (20.0, 60.0), "memory": (200.0, 800.0), "network_rx": (1e3, 1e4), "network_tx": (1e3, 1e4)}
KPI_NOISE = 0.05  # noise stddev as a fraction of the level
KPI_NOISE_CLIP = 2.0  # healthy noise is clipped to this many stddevs
PROPAGATED_Z = 0.5  # share of a service fault's excursion seen on its pods
ERROR_CODE = 13
GROUND_TRUTH_FIELDS = ("trace_id", "root_cause", "fault_kind")


def _camel(service: str) -> str:
    base = service[: -len("service")] if service.endswith("service") and service != "service" else service
    return base.capitalize() + ("Service" if base != service else "")


@dataclass(frozen=True)
class TopologySpec:
    """Services with their pods, node placement and an acyclic call graph.

    The entry service serves ``routes``: entry operation -> downstream
    services called in order. Every other service calls ``calls[service]``.
    """

    pods: Mapping[str, tuple[str, ...]]
    placement: Mapping[str, str]
    calls: Mapping[str, tuple[str, ...]]
    routes: Mapping[str, tuple[str, ...]]
    entry_service: str = "frontend"
    own_latency_us: Mapping[str, float] = field(default_factory=dict)
    route_weights: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.entry_service not in self.pods:
            raise SpecError(f"entry service {self.entry_service!r} has no pods")
        for svc, pods in self.pods.items():
            if not pods:
                raise SpecError(f"service {svc} has no pods")
            for p in pods:
                if p not in self.placement:
                    raise SpecError(f"pod {p} is not placed on a node")
        for svc, callees in [*self.calls.items(), *[(self.entry_service, c) for c in self.routes.values()]]:
            for c in callees:
                if c not in self.pods:
                    raise SpecError(f"{svc} calls unknown service {c!r}")
        if not self.routes:
            raise SpecError("at least one entry route is required")
        # acyclic call graph
        state: dict[str, int] = {}

        def visit(s: str) -> None:
            if state.get(s) == 1:
                raise SpecError(f"call graph cycle through {s}")
            if state.get(s) == 2:
                return
            state[s] = 1
            for c in self.calls.get(s, ()):
                visit(c)
            state[s] = 2

        for s in self.pods:
            visit(s)
        for callees in self.routes.values():
            if self.entry_service in callees:
                raise SpecError("entry service cannot call itself")

    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(sorted(set(self.placement.values())))

    @property
    def services(self) -> tuple[str, ...]:
        return tuple(self.pods)

    def operation(self, service: str) -> str:
        return f"hipstershop.{_camel(service)}/Handle"

    def component_topology(self) -> ComponentTopology:
        return ComponentTopology.from_rows(
            (p, svc, self.placement[p]) for svc, pods in self.pods.items() for p in pods
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "pods": {k: list(v) for k, v in self.pods.items()},
            "placement": dict(self.placement),
            "calls": {k: list(v) for k, v in self.calls.items()},
            "routes": {k: list(v) for k, v in self.routes.items()},
            "entry_service": self.entry_service,
            "own_latency_us": dict(self.own_latency_us),
            "route_weights": dict(self.route_weights),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TopologySpec:
        try:
            pods = d["pods"]
            if isinstance(next(iter(pods.values()), ()), int):
                pods = {s: [f"{s}-{i}" for i in range(n)] for s, n in pods.items()}
            spec = cls(
                pods={k: tuple(v) for k, v in pods.items()},
                placement=dict(d["placement"]),
                calls={k: tuple(v) for k, v in d.get("calls", {}).items()},
                routes={k: tuple(v) for k, v in d["routes"].items()},
                entry_service=d.get("entry_service", "frontend"),
                own_latency_us={k: float(v) for k, v in d.get("own_latency_us", {}).items()},
                route_weights={k: float(v) for k, v in d.get("route_weights", {}).items()},
            )
        except (KeyError, TypeError, AttributeError, StopIteration) as exc:
            raise SpecError(f"bad topology spec: {exc}") from exc
        spec.validate()
        return spec


@dataclass(frozen=True)
class FaultSpec:
    target: str
    kind: str
    window: tuple[int, int]
    magnitude: float = 200.0  # latency multiplier relative to the entry operation's baseline
    kpi_z: float = 6.0  # KPI excursion in noise standard deviations

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


@dataclass(frozen=True)
class Workload:
    start_ms: int = 1_650_000_000_000
    duration_ms: int = 90 * MINUTE
    interval_ms: int = 5_000

    def __post_init__(self):
        if self.duration_ms <= 0 or self.interval_ms <= 0:
            raise SpecError("workload duration and interval must be positive")

    @property
    def end_ms(self) -> int:
        return self.start_ms + self.duration_ms


@dataclass(frozen=True)
class GroundTruth:
    trace_id: str
    root_cause: str
    fault_kind: str


# --------------------------------------------------------------------------- default topology


def default_topology(pods_per_service: int = 2, n_nodes: int = 6) -> TopologySpec:
    """A small online-boutique style system with a deep checkout path."""
    services = [
        "frontend",
        "cartservice",
        "productcatalogservice",
        "currencyservice",
        "recommendationservice",
        "adservice",
        "checkoutservice",
        "shippingservice",
        "paymentservice",
        "emailservice",
    ]
    pods = {s: tuple(f"{s}-{i}" for i in range(pods_per_service)) for s in services}
    nodes = [f"node-{i + 1}" for i in range(n_nodes)]
    all_pods = [p for s in services for p in pods[s]]
    placement = {p: nodes[i % n_nodes] for i, p in enumerate(all_pods)}
    calls = {
        "checkoutservice": (
            "cartservice",
            "productcatalogservice",
            "currencyservice",
            "shippingservice",
            "paymentservice",
            "emailservice",
        ),
        "recommendationservice": ("productcatalogservice",),
    }
    routes = {
        "hipstershop.Frontend/Home": (
            "currencyservice",
            "productcatalogservice",
            "cartservice",
            "recommendationservice",
            "adservice",
        ),
        "hipstershop.Frontend/Product": ("productcatalogservice", "currencyservice", "recommendationservice"),
        "hipstershop.Frontend/Cart": ("cartservice", "shippingservice", "currencyservice"),
        "hipstershop.Frontend/PlaceOrder": ("checkoutservice",),
    }
    own = {
        "frontend": 3000.0,
        "cartservice": 1500.0,
        "productcatalogservice": 800.0,
        "currencyservice": 400.0,
        "recommendationservice": 2000.0,
        "adservice": 1200.0,
        "checkoutservice": 4000.0,
        "shippingservice": 900.0,
        "paymentservice": 2500.0,
        "emailservice": 1800.0,
    }
    return TopologySpec(pods, placement, calls, routes, "frontend", own)


# --------------------------------------------------------------------------- generation


class _Node:
    __slots__ = ("idx", "parent", "pod", "service", "op", "server", "base", "extra", "status", "children")

    def __init__(self, idx, parent, pod, service, op, server, base):
        self.idx = idx
        self.parent = parent
        self.pod = pod
        self.service = service
        self.op = op
        self.server = server
        self.base = base
        self.extra = 0.0
        self.status = 0
        self.children: list[_Node] = []


@dataclass
class _Request:
    trace_id: str
    start_ms: int
    route: str
    nodes: list[_Node]


def _build_request(
    spec: TopologySpec, trace_id: str, start_ms: int, route: str, rng: np.random.Generator
) -> _Request:
    nodes: list[_Node] = []

    def server(service: str, op: str, pod: str, parent: _Node | None, callees: Sequence[str]) -> _Node:
        mean = spec.own_latency_us.get(service, 1000.0)
        n = _Node(len(nodes), parent, pod, service, op, True, mean * rng.lognormal(0.0, 0.1))
        nodes.append(n)
        for callee in callees:
            cop = spec.operation(callee)
            c = _Node(len(nodes), n, pod, service, cop, False, 250.0 * rng.lognormal(0.0, 0.2))
            nodes.append(c)
            n.children.append(c)
            cpods = spec.pods[callee]
            cpod = cpods[int(rng.integers(len(cpods)))]
            c.children.append(server(callee, cop, cpod, c, spec.calls.get(callee, ())))
        return n

    epods = spec.pods[spec.entry_service]
    epod = epods[int(rng.integers(len(epods)))]
    server(spec.entry_service, route, epod, None, spec.routes[route])
    return _Request(trace_id, start_ms, route, nodes)


def _layout(req: _Request) -> list[Span]:
    """Durations bottom-up (children run sequentially) and start times top-down."""
    dur: dict[int, float] = {}
    for n in reversed(req.nodes):
        dur[n.idx] = n.base + n.extra + sum(dur[c.idx] for c in n.children)
    start: dict[int, float] = {0: req.start_ms * 1000.0}
    spans = []
    for n in req.nodes:
        t = start[n.idx] + (n.base + n.extra) / 2
        for c in n.children:
            start[c.idx] = t
            t += dur[c.idx]
        spans.append(
            Span(
                trace_id=req.trace_id,
                span_id=f"{req.trace_id}-{n.idx:03d}",
                parent_span_id=None if n.parent is None else f"{req.trace_id}-{n.parent.idx:03d}",
                timestamp=int(start[n.idx] // 1000),
                cmdb_id=n.pod,
                service=n.service,
                operation=n.op,
                duration=int(round(dur[n.idx])),
                status_code=n.status,
                type="rpc" if n.server else "client",
            )
        )
    return spans


def _affected_pods(fault: FaultSpec, topo: ComponentTopology) -> set[str]:
    kind = topo.classify(fault.target)
    if kind == "pod":
        return {fault.target}
    if kind == "service":
        return set(topo.service_to_pods[fault.target])
    if kind == "node":
        return {p for p, n in topo.pod_to_node.items() if n == fault.target}
    raise SpecError(f"fault target {fault.target!r} is not a pod, service or node")


def _inject(req: _Request, fault: FaultSpec, pods: set[str], delay: float) -> bool:
    hit = False
    for n in req.nodes:
        if not (n.server and n.pod in pods):
            continue
        outgoing = [c for c in n.children if not c.server]
        targets = outgoing if fault.kind == "network" and outgoing else [n]
        for t in targets:
            t.extra += delay
            if fault.kind in ("error", "network"):
                t.status = ERROR_CODE
                p = t.parent
                while p is not None:
                    p.status = ERROR_CODE
                    p = p.parent
        hit = True
    return hit


@dataclass
class Bundle:
    """Generated dataset plus its ground truth."""

    spans: list[Span]
    metrics: MetricStore
    topology: ComponentTopology
    baselines: BaselineTable
    ground_truth: list[GroundTruth]
    spec: dict[str, Any]
    faults: tuple[FaultSpec, ...] = ()

    @property
    def labeled_traces(self) -> list[str]:
        return [g.trace_id for g in self.ground_truth]

    def truth_for(self, trace_id: str) -> GroundTruth:
        for g in self.ground_truth:
            if g.trace_id == trace_id:
                return g
        raise KeyError(trace_id)

    def dataset(self):
        from .coordinator import Dataset

        return Dataset.from_spans(self.spans, self.metrics, self.topology, self.baselines)

    def write(self, out_dir: str | Path) -> dict[str, str]:
        """Write the CSV files and spec; returns sha256 digests by file name."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_trace_csv(self.spans, out / "traces.csv")
        self.metrics.to_csv(out / "metrics.csv")
        self.topology.to_csv(out / "topology.csv")
        self.baselines.to_csv(out / "baselines.csv")
        with open(out / "ground_truth.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(GROUND_TRUTH_FIELDS)
            for g in self.ground_truth:
                w.writerow([g.trace_id, g.root_cause, g.fault_kind])
        (out / "spec.json").write_text(json.dumps(self.spec, indent=2, sort_keys=True) + "\n")
        names = ["traces.csv", "metrics.csv", "topology.csv", "baselines.csv", "ground_truth.csv", "spec.json"]
        return {n: hashlib.sha256((out / n).read_bytes()).hexdigest() for n in names}


def _generate_metrics(
    spec: TopologySpec,
    topo: ComponentTopology,
    workload: Workload,
    faults: Sequence[FaultSpec],
    rng: np.random.Generator,
) -> MetricStore:
    ts = np.arange(workload.start_ms, workload.end_ms + 1, MINUTE, dtype=np.int64)
    comps = sorted(topo.pods) + sorted(topo.services) + sorted(topo.nodes)
    series = []
    for comp in comps:
        for kpi in KPIS:
            lo, hi = KPI_LEVELS[kpi]
            level = rng.uniform(lo, hi)
            sigma = KPI_NOISE * level
            values = level + sigma * np.clip(rng.standard_normal(ts.size), -KPI_NOISE_CLIP, KPI_NOISE_CLIP)
            for f in faults:
                z = _excursion_z(f, comp, kpi, topo)
                if z:
                    mask = (ts >= f.window[0]) & (ts <= f.window[1])
                    values[mask] += z * sigma
            series.append(MetricSeries(comp, kpi, ts, values))
    return MetricStore(series)


def _excursion_z(fault: FaultSpec, comp: str, kpi: str, topo: ComponentTopology) -> float:
    if kpi not in KIND_KPIS[fault.kind]:
        return 0.0
    if comp == fault.target:
        return fault.kpi_z
    if topo.classify(fault.target) == "service" and topo.pod_to_service.get(comp) == fault.target:
        return PROPAGATED_Z * fault.kpi_z
    return 0.0


def generate(
    topology: TopologySpec,
    workload: Workload = Workload(),
    faults: Iterable[FaultSpec] = (),
    seed: int = 0,
    *,
    factor: float = DEFAULT_ABNORMAL_FACTOR,
) -> Bundle:
    """Simulate requests and KPIs with injected faults.

    Baselines come from requests before the first fault window. A faulted
    pod's spans are delayed by ``magnitude`` times the request's entry
    baseline; error and network faults also set status code 13 up to the
    entry. KPI excursions of ``kpi_z`` noise deviations hit the target during
    the fault window, at half strength on the pods of a faulted service.
    """
    topology.validate()
    faults = tuple(faults)
    topo = topology.component_topology()
    for f in faults:
        if f.kind not in FAULT_KINDS:
            raise SpecError(f"unknown fault kind {f.kind!r}")
        if not (workload.start_ms <= f.window[0] < f.window[1] <= workload.end_ms):
            raise SpecError(f"fault window {f.window} outside the workload")
        if f.magnitude <= 1:
            raise SpecError("latency magnitude must exceed 1")
        _affected_pods(f, topo)

    routes = sorted(topology.routes)
    weights = np.array([topology.route_weights.get(r, 1.0) for r in routes], dtype=float)
    weights /= weights.sum()

    requests = []
    starts = np.arange(workload.start_ms, workload.end_ms, workload.interval_ms)
    for i, t in enumerate(starts.tolist()):
        rng = np.random.default_rng([seed, i])
        route = routes[int(rng.choice(len(routes), p=weights))]
        jitter = int(rng.integers(0, max(1, workload.interval_ms // 2)))
        requests.append(_build_request(topology, f"t{i:06d}", t + jitter, route, rng))

    healthy = {r.trace_id: _layout(r) for r in requests}
    normal_end = min((f.window[0] for f in faults), default=workload.end_ms + 1)
    baselines = BaselineTable.from_spans(
        (s for spans in healthy.values() for s in spans), (workload.start_ms, normal_end)
    )

    truth = []
    spans: list[Span] = []
    for req in requests:
        hits = []
        for f in faults:
            if not (f.window[0] <= req.start_ms <= f.window[1]):
                continue
            entry_mean = baselines.lookup(topology.entry_service, req.route).mean_latency
            if _inject(req, f, _affected_pods(f, topo), f.magnitude * entry_mean):
                hits.append(f)
        out = _layout(req) if hits else healthy[req.trace_id]
        spans.extend(out)
        if hits and is_abnormal_entry(out[0], baselines, factor):
            truth.append(GroundTruth(req.trace_id, hits[0].target, hits[0].kind))

    metrics = _generate_metrics(topology, topo, workload, faults, np.random.default_rng([seed, 1 << 30]))
    spec = {
        "topology": topology.to_dict(),
        "workload": asdict(workload),
        "faults": [f.to_dict() for f in faults],
        "seed": seed,
    }
    return Bundle(spans, metrics, topo, baselines, truth, spec, faults)


# --------------------------------------------------------------------------- scenarios


def load_spec(data: Mapping[str, Any] | str | Path) -> tuple[TopologySpec, Workload, tuple[FaultSpec, ...], int]:
    """Decode a simulator spec (JSON text, path or mapping)."""
    if isinstance(data, Path) or (isinstance(data, str) and not data.lstrip().startswith("{")):
        try:
            data = json.loads(Path(data).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise SpecError(f"cannot read spec: {exc}") from exc
    elif isinstance(data, str):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec is not valid JSON: {exc}") from exc
    if not isinstance(data, Mapping):
        raise SpecError("spec must be an object")
    topo = TopologySpec.from_dict(data["topology"]) if "topology" in data else default_topology()
    try:
        workload = Workload(**data.get("workload", {}))
        faults = tuple(
            FaultSpec(
                target=f["target"],
                kind=f["kind"],
                window=(int(f["window"][0]), int(f["window"][1])),
                magnitude=float(f.get("magnitude", 200.0)),
                kpi_z=float(f.get("kpi_z", 6.0)),
            )
            for f in data.get("faults", [])
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise SpecError(f"bad workload or fault spec: {exc}") from exc
    return topo, workload, faults, int(data.get("seed", 0))


def fault_window(workload: Workload, start_min: int = 70, length_min: int = 5) -> tuple[int, int]:
    s = workload.start_ms + start_min * MINUTE
    return s, s + length_min * MINUTE


def _figure_topology(routes: Mapping[str, tuple[str, ...]], calls: Mapping[str, tuple[str, ...]],
                     pods: Mapping[str, tuple[str, ...]], placement: Mapping[str, str]) -> TopologySpec:
    own = default_topology().own_latency_us
    return TopologySpec(pods, placement, calls, routes, "frontend", dict(own))


def scenario_figure2(seed: int = 0) -> Bundle:
    """Home-page requests time out through the recommendation path.

    The recommendation service suffers packet corruption: its pod's outgoing
    product-catalog call stalls and errors, the service's network KPIs swing
    hardest, its pod's less, while frontend2-0, productcatalogservice and
    node-5 stay flat. Ground truth is ``recommendationservice``.
    """
    pods = {
        "frontend": ("frontend2-0",),
        "cartservice": ("cartservice-0",),
        "recommendationservice": ("recommendationservice2-0",),
        "productcatalogservice": ("productcatalogservice-0",),
        "currencyservice": ("currencyservice-0",),
    }
    placement = {
        "frontend2-0": "node-5",
        "recommendationservice2-0": "node-5",
        "cartservice-0": "node-1",
        "productcatalogservice-0": "node-2",
        "currencyservice-0": "node-3",
    }
    spec = _figure_topology(
        {"hipstershop.Frontend/Home": ("cartservice", "recommendationservice", "currencyservice")},
        {"recommendationservice": ("productcatalogservice",)},
        pods,
        placement,
    )
    workload = Workload(interval_ms=30_000)
    fault = FaultSpec("recommendationservice", "network", fault_window(workload), magnitude=250.0, kpi_z=9.0)
    return generate(spec, workload, [fault], seed)


def scenario_figure3(seed: int = 0, target: str = "emailservice", kind: str = "latency") -> Bundle:
    """Order placement whose failure sits in the email call three levels below the checkout pod."""
    pods = {
        "frontend": ("frontend2-0",),
        "checkoutservice": ("checkoutservice2-0",),
        "cartservice": ("cartservice-0",),
        "paymentservice": ("paymentservice-0",),
        "emailservice": ("emailservice-0",),
    }
    placement = {
        "frontend2-0": "node-4",
        "checkoutservice2-0": "node-5",
        "cartservice-0": "node-1",
        "paymentservice-0": "node-2",
        "emailservice-0": "node-3",
    }
    spec = _figure_topology(
        {"hipstershop.Frontend/PlaceOrder": ("checkoutservice",)},
        {"checkoutservice": ("cartservice", "paymentservice", "emailservice")},
        pods,
        placement,
    )
    workload = Workload(interval_ms=30_000)
    fault = FaultSpec(target, kind, fault_window(workload), magnitude=250.0, kpi_z=8.0)
    return generate(spec, workload, [fault], seed)


def random_episode(
    seed: int,
    target_type: str,
    kind: str,
    *,
    topology: TopologySpec | None = None,
    candidates: Sequence[str] | None = None,
    magnitude: float = 200.0,
    kpi_z: float = 6.0,
) -> Bundle:
    """One fault of ``kind`` on a randomly drawn pod, service or node."""
    topology = topology or default_topology()
    topo = topology.component_topology()
    pool = sorted(
        candidates
        if candidates is not None
        else {"pod": topo.pods, "service": topo.services, "node": topo.nodes}[target_type]
    )
    rng = np.random.default_rng([seed, 7919])
    target = pool[int(rng.integers(len(pool)))]
    workload = Workload()
    fault = FaultSpec(target, kind, fault_window(workload), magnitude=magnitude, kpi_z=kpi_z)
    return generate(topology, workload, [fault], seed)
