import json

import numpy as np
import pytest

from rcl.errors import SpecError
from rcl.metrics_store import historical_stats
from rcl.simulator import (
    FaultSpec,
    TopologySpec,
    Workload,
    default_topology,
    fault_window,
    generate,
    load_spec,
    random_episode,
    scenario_figure2,
)
from rcl.trace_model import build_trace_tree, group_by_trace, is_abnormal_entry

SHORT = Workload(duration_ms=80 * 60_000, interval_ms=20_000)


def kpi_peak_z(bundle, comp, kpi, window):
    s = bundle.metrics.series(comp, kpi)
    stats = historical_stats(s, (window[0] - 3_900_000, window[0] - 300_000))
    _, vals = s.between(*window, closed=True)
    return float(np.max(np.abs(vals - stats.mean)) / stats.stddev)


@pytest.fixture(scope="module")
def fig2():
    return scenario_figure2(0)


class TestFigure2:
    def test_ground_truth(self, fig2):
        assert {g.root_cause for g in fig2.ground_truth} == {"recommendationservice"}
        assert len(fig2.ground_truth) >= 5

    def test_entry_status_13(self, fig2):
        traces = group_by_trace(fig2.spans)
        for tid in fig2.labeled_traces:
            assert build_trace_tree(traces[tid]).entry.status_code == 13

    def test_node5_and_bystanders_flat(self, fig2):
        w = fig2.faults[0].window
        for comp in ("node-5", "frontend2-0", "productcatalogservice"):
            for kpi in ("cpu", "memory", "network_rx", "network_tx"):
                assert kpi_peak_z(fig2, comp, kpi, w) < 3, (comp, kpi)

    def test_service_stronger_than_pod(self, fig2):
        w = fig2.faults[0].window
        assert kpi_peak_z(fig2, "recommendationservice", "network_tx", w) > kpi_peak_z(
            fig2, "recommendationservice2-0", "network_tx", w) > 3


class TestGenerate:
    def test_no_faults_nothing_abnormal(self):
        b = generate(default_topology(), SHORT, [], seed=1)
        assert b.ground_truth == []
        for spans in group_by_trace(b.spans).values():
            assert not is_abnormal_entry(build_trace_tree(spans).entry, b.baselines)

    def test_pod_latency_fault(self):
        w = fault_window(Workload(), 70, 5)
        b = generate(default_topology(), Workload(), [FaultSpec("cartservice-0", "latency", w, 200, 6)], seed=2)
        traces = group_by_trace(b.spans)
        routed = [t for t, spans in traces.items()
                  if any(s.cmdb_id == "cartservice-0" for s in spans)
                  and w[0] <= build_trace_tree(spans).entry.timestamp <= w[1]]
        assert routed and set(routed) <= set(b.labeled_traces)
        assert kpi_peak_z(b, "cartservice-0", "cpu", w) > 5

    def test_node_fault(self):
        topo = default_topology()
        w = fault_window(Workload())
        b = generate(topo, Workload(), [FaultSpec("node-5", "latency", w)], seed=4)
        assert b.ground_truth and all(g.root_cause == "node-5" for g in b.ground_truth)
        node_z = kpi_peak_z(b, "node-5", "cpu", w)
        others = [kpi_peak_z(b, c, "cpu", w) for c in b.topology.pods]
        assert node_z > max(others)

    def test_label_soundness(self):
        for kind in ("latency", "error", "network"):
            b = random_episode(5, "service", kind)
            trees = {t: build_trace_tree(s) for t, s in group_by_trace(b.spans).items()}
            f = b.faults[0]
            kpi = {"latency": "cpu", "error": "cpu", "network": "network_tx"}[kind]
            assert kpi_peak_z(b, f.target, kpi, f.window) > 3
            for g in b.ground_truth:
                assert is_abnormal_entry(trees[g.trace_id].entry, b.baselines)

    def test_healthy_flag_rate(self):
        b = generate(default_topology(), SHORT, [], seed=9)
        flagged = total = 0
        for s in b.metrics:
            stats = historical_stats(s, (s.timestamps[0], s.timestamps[0] + 3_600_000))
            _, vals = s.between(s.timestamps[0] + 3_600_000, s.timestamps[-1], closed=True)
            flagged += int(np.sum(np.abs(vals - stats.mean) > 3 * stats.stddev))
            total += vals.size
        assert flagged / total <= 0.01

    def test_error_faults_set_status(self):
        b = random_episode(1, "pod", "error")
        traces = group_by_trace(b.spans)
        for g in b.ground_truth:
            tree = build_trace_tree(traces[g.trace_id])
            assert tree.entry.status_code == 13

    def test_deterministic_files(self, tmp_path):
        a = random_episode(7, "pod", "network").write(tmp_path / "a")
        b = random_episode(7, "pod", "network").write(tmp_path / "b")
        assert a == b
        assert (tmp_path / "a" / "traces.csv").read_bytes() == (tmp_path / "b" / "traces.csv").read_bytes()
        c = random_episode(8, "pod", "network").write(tmp_path / "c")
        assert c["traces.csv"] != a["traces.csv"]


class TestSpec:
    def test_round_trip(self, tmp_path):
        topo = default_topology()
        w = fault_window(Workload())
        b = generate(topo, Workload(), [FaultSpec("emailservice", "error", w)], seed=3)
        b.write(tmp_path)
        t2, wl, faults, seed = load_spec(tmp_path / "spec.json")
        assert (t2, wl, faults, seed) == (topo, Workload(), (FaultSpec("emailservice", "error", w),), 3)

    def test_pod_counts_shorthand(self):
        spec = {"pods": {"frontend": 1, "a": 2}, "placement": {"frontend-0": "n1", "a-0": "n1", "a-1": "n2"},
                "routes": {"hipstershop.Frontend/Home": ["a"]}}
        t = TopologySpec.from_dict(spec)
        assert t.pods["a"] == ("a-0", "a-1")

    @pytest.mark.parametrize("text", ["{bad", "[1, 2]", '{"faults": [{"kind": "latency"}]}'])
    def test_malformed(self, text):
        with pytest.raises(SpecError):
            load_spec(text)

    def test_cycle_rejected(self):
        spec = {"pods": {"frontend": ["f-0"], "a": ["a-0"], "b": ["b-0"]},
                "placement": {"f-0": "n", "a-0": "n", "b-0": "n"},
                "calls": {"a": ["b"], "b": ["a"]}, "routes": {"r": ["a"]}}
        with pytest.raises(SpecError, match="cycle"):
            TopologySpec.from_dict(spec)

    @pytest.mark.parametrize("fault", [
        FaultSpec("ghost", "latency", (1_650_000_000_000, 1_650_000_060_000)),
        FaultSpec("cartservice", "meltdown", (1_650_000_000_000, 1_650_000_060_000)),
        FaultSpec("cartservice", "latency", (0, 1)),
        FaultSpec("cartservice", "latency", (1_650_000_000_000, 1_650_000_060_000), magnitude=1),
    ])
    def test_bad_faults(self, fault):
        with pytest.raises(SpecError):
            generate(default_topology(), SHORT, [fault])

    def test_json_spec_text(self):
        text = json.dumps({"seed": 11, "workload": {"interval_ms": 60000}})
        _, wl, faults, seed = load_spec(text)
        assert seed == 11 and wl.interval_ms == 60000 and faults == ()
