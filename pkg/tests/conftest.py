from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from rcl.coordinator import Dataset
from rcl.metrics_store import ComponentTopology, MetricSeries, MetricStore
from rcl.trace_model import BaselineTable, OperationBaseline, build_trace_tree, load_spans

FIXTURES = Path(__file__).parent / "fixtures"
T0 = 1_650_000_000_000
MINUTE = 60_000
KPIS = ("cpu", "memory", "network_rx", "network_tx")


def flat_series(component: str, kpi: str, t0: int = T0, *, level: float = 50.0, sigma: float = 1.0,
                spike_z: float = 0.0, before_min: int = 90, after_min: int = 20) -> MetricSeries:
    """Alternating +-sigma around ``level`` at 1-min cadence, so the reference mean and
    population stddev are exactly ``level`` and ``sigma``; optional spike at ``t0``."""
    ts = np.arange(t0 - before_min * MINUTE, t0 + after_min * MINUTE + 1, MINUTE, dtype=np.int64)
    signs = np.where(np.arange(ts.size) % 2 == 0, 1.0, -1.0)
    vals = level + sigma * signs
    if spike_z:
        vals[ts == t0] = level + spike_z * sigma
    return MetricSeries(component, kpi, ts, vals)


def make_store(components, spikes=None, t0: int = T0) -> MetricStore:
    """One flat series per (component, KPI); ``spikes`` maps (component, kpi) -> z at t0."""
    spikes = spikes or {}
    return MetricStore(
        flat_series(c, k, t0, spike_z=spikes.get((c, k), 0.0)) for c in components for k in KPIS
    )


@pytest.fixture
def fig2_spans():
    return load_spans(FIXTURES / "fig2_trace.csv")


@pytest.fixture
def fig2_tree(fig2_spans):
    return build_trace_tree(fig2_spans)


@pytest.fixture
def fig2_topology():
    return ComponentTopology.from_csv(FIXTURES / "fig2_topology.csv")


@pytest.fixture
def fig2_baselines():
    rows = {
        ("frontend", "hipstershop.Frontend/Home"): 40_000.0,
        ("frontend", "hipstershop.CartService/GetCart"): 2_000.0,
        ("frontend", "hipstershop.RecommendationService/List"): 10_000.0,
        ("frontend", "hipstershop.CurrencyService/GetSupportedCurrencies"): 1_500.0,
        ("cartservice", "hipstershop.CartService/GetCart"): 1_800.0,
        ("recommendationservice", "hipstershop.RecommendationService/List"): 9_000.0,
        ("recommendationservice", "hipstershop.ProductCatalogService/ListProducts"): 1_200.0,
        ("productcatalogservice", "hipstershop.ProductCatalogService/ListProducts"): 900.0,
    }
    return BaselineTable(OperationBaseline(k, v, 100) for k, v in rows.items())


@pytest.fixture
def fig2_store(fig2_topology):
    comps = sorted(fig2_topology.pods | fig2_topology.services | fig2_topology.nodes)
    spikes = {("recommendationservice", "network_tx"): 8.0, ("recommendationservice2-0", "network_tx"): 4.0}
    return make_store(comps, spikes)


@pytest.fixture
def fig2_dataset(fig2_spans, fig2_store, fig2_topology, fig2_baselines):
    return Dataset.from_spans(fig2_spans, fig2_store, fig2_topology, fig2_baselines)


def random_tree_spans(rng: np.random.Generator, n: int, *, trace_id: str = "rt", t0: int = T0,
                      n_pods: int = 12, fault_rate: float = 0.05) -> list:
    """A random call tree of ``n`` spans with some erroring or slow spans sprinkled in."""
    from rcl.trace_model import Span

    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
    pods = [f"svc{k}-0" for k in range(n_pods)]
    spans = []
    for i, p in enumerate(parents):
        pod = pods[int(rng.integers(n_pods))]
        bad = rng.random() < fault_rate
        spans.append(Span(
            trace_id, f"{trace_id}-{i}", None if p < 0 else f"{trace_id}-{p}",
            t0 + int(rng.integers(0, 1000)), pod, pod[:-2], f"op{int(rng.integers(5))}",
            int(rng.integers(1, 10**6)), 13 if bad else 0,
        ))
    return spans


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
