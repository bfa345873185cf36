import pytest

from rcl.errors import PreconditionError
from rcl.metrics_store import FluctuationSegment, MetricStats
from rcl.reasoner import (
    UNKNOWN,
    CandidateComponent,
    DeadEnd,
    Descend,
    DeterministicPolicy,
    PotentialRootCause,
    QueryTuple,
    ReasoningContext,
    RootCauseReport,
    assess_candidate,
    callee_service,
    candidates_for_span,
    expand_dimensions,
    format_report,
    infer_query,
    path_label,
    verify_with_metrics,
)
from rcl.trace_model import ChildInfo, Span, build_trace_tree, children

from .conftest import T0


def seg(comp, z, kpi="network_tx", onset=T0):
    return FluctuationSegment(comp, kpi, ((onset, z),), float(z), onset, MetricStats(0.0, 1.0, (0, 1)))


def pod(cid, source="s5"):
    return CandidateComponent(cid, "pod", source)


class TestAssess:
    def test_descends_into_failing_child(self, fig2_tree, fig2_baselines):
        ctx = ReasoningContext.for_tree(fig2_tree)
        d = assess_candidate(DeterministicPolicy(fig2_baselines), "s1", children(fig2_tree, "s1"), ctx)
        assert d == Descend(("s3",))
        assert ctx.focus == "s1" and "s1" in ctx.visited and ctx.evidence

    def test_leaf_with_anomalous_duration(self, fig2_baselines):
        s = Span("t", "x", None, T0, "emailservice-0", "emailservice", "op", 10**6)
        tree = build_trace_tree([s])
        from rcl.trace_model import BaselineTable, OperationBaseline

        tbl = BaselineTable([OperationBaseline(("emailservice", "op"), 1000.0, 5)])
        d = assess_candidate(DeterministicPolicy(tbl), "x", (), ReasoningContext.for_tree(tree))
        assert isinstance(d, PotentialRootCause)

    def test_dead_end(self, fig2_tree, fig2_baselines):
        d = assess_candidate(DeterministicPolicy(fig2_baselines), "s8", children(fig2_tree, "s8"),
                             ReasoningContext.for_tree(fig2_tree))
        assert isinstance(d, DeadEnd)

    def test_shallow_stops_off_entry_pod(self, fig2_tree, fig2_baselines):
        pol = DeterministicPolicy(fig2_baselines, shallow=True)
        ctx = ReasoningContext.for_tree(fig2_tree)
        assert isinstance(assess_candidate(pol, "s3", children(fig2_tree, "s3"), ctx), Descend)
        assert isinstance(assess_candidate(pol, "s5", children(fig2_tree, "s5"), ctx), PotentialRootCause)
        deep = pol.with_shallow(False)
        assert isinstance(assess_candidate(deep, "s5", children(fig2_tree, "s5"), ctx), Descend)

    def test_alpha_rule(self, fig2_tree):
        # no baselines: only status and share of parent latency matter
        pol = DeterministicPolicy(None, alpha=0.5)
        kids = (ChildInfo(0, "s2", "x", "op", 60, 0), ChildInfo(0, "s3", "x", "op", 40, 0))
        parent = Span("t", "p", None, 0, "a-0", "a", "op", 100)
        assert pol.suspicious_child(kids[0], parent) and not pol.suspicious_child(kids[1], parent)

    def test_error_first_ordering(self, fig2_tree):
        pol = DeterministicPolicy(None)
        span = fig2_tree.span("s1")
        data = (
            ChildInfo(0, "b", "x", "op", span.duration, 0),
            ChildInfo(0, "a", "x", "op", 10, 13),
            ChildInfo(0, "c", "x", "op", span.duration, 0),
        )
        assert pol.decide("s1", data, ReasoningContext.for_tree(fig2_tree)) == Descend(("a", "b", "c"))

    def test_invalid_targets_filtered(self, fig2_tree):
        class Bad:
            def instruction(self, s, ctx):
                return "x"

            def decide(self, s, data, ctx):
                return Descend(("s3", "nope"))

        ctx = ReasoningContext.for_tree(fig2_tree)
        assert assess_candidate(Bad(), "s1", children(fig2_tree, "s1"), ctx) == Descend(("s3",))
        assert any("non-child" in e for e in ctx.evidence)

    def test_policy_failure_is_dead_end(self, fig2_tree):
        class Boom:
            def instruction(self, s, ctx):
                return "x"

            def decide(self, s, data, ctx):
                raise RuntimeError("model unavailable")

        d = assess_candidate(Boom(), "s1", (), ReasoningContext.for_tree(fig2_tree))
        assert isinstance(d, DeadEnd) and "model unavailable" in d.note


class TestExpansion:
    def test_recommendation_pod(self, fig2_topology):
        out = expand_dimensions(pod("recommendationservice2-0"), fig2_topology)
        assert [(c.id, c.dimension) for c in out] == [
            ("recommendationservice2-0", "pod"), ("recommendationservice", "service"), ("node-5", "node")]

    def test_checkout_on_node5(self, fig2_topology):
        assert "node-5" in {c.id for c in expand_dimensions(pod("checkoutservice2-0"), fig2_topology)}

    def test_unknown_pod(self, fig2_topology):
        diag = []
        out = expand_dimensions(pod("ghost-0"), fig2_topology, diagnostics=diag)
        assert [c.id for c in out] == ["ghost-0"] and diag

    def test_missing_node(self):
        from rcl.metrics_store import ComponentTopology

        topo = ComponentTopology.from_rows([("a-0", "a", None)])
        diag = []
        assert [c.id for c in expand_dimensions(pod("a-0"), topo, diagnostics=diag)] == ["a-0", "a"]
        assert diag == ["no node mapping for a-0"]

    def test_needs_pod(self, fig2_topology):
        with pytest.raises(PreconditionError):
            expand_dimensions(CandidateComponent("frontend", "service", "s1"), fig2_topology)

    def test_callee_service(self, fig2_topology):
        assert callee_service("hipstershop.ProductCatalogService/ListProducts", fig2_topology) == "productcatalogservice"
        assert callee_service("hipstershop.AdService/GetAds", fig2_topology) is None
        assert callee_service("GET /", fig2_topology) is None

    def test_candidates_for_fig2_span(self, fig2_tree, fig2_topology):
        ids = [c.id for c in candidates_for_span(fig2_tree, "s6", fig2_topology)]
        assert ids[0] == "recommendationservice2-0"
        assert set(ids) == {"recommendationservice2-0", "recommendationservice", "node-5", "frontend2-0",
                            "frontend", "productcatalogservice"}
        assert path_label(fig2_tree, "s6") == ("frontend2-0", "recommendationservice2-0")


class TestQuery:
    FIVE = ["frontend2-0", "recommendationservice2-0", "recommendationservice", "productcatalogservice", "node-5"]

    def test_five_keywords(self, fig2_tree):
        ctx = ReasoningContext.for_tree(fig2_tree)
        q = infer_query(ctx, [CandidateComponent(c, "service", "s6") for c in self.FIVE], 300_000)
        assert q == QueryTuple(tuple(self.FIVE), (fig2_tree.entry.timestamp - 300_000, fig2_tree.entry.timestamp + 300_000))

    def test_single_pod_after_expansion(self, fig2_tree, fig2_topology):
        ctx = ReasoningContext.for_tree(fig2_tree)
        q = infer_query(ctx, expand_dimensions(pod("recommendationservice2-0"), fig2_topology), 300_000)
        assert set(q.keywords) == {"recommendationservice2-0", "recommendationservice", "node-5"}

    def test_clamped(self, fig2_tree):
        ctx = ReasoningContext.for_tree(fig2_tree)
        t0 = fig2_tree.entry.timestamp
        q = infer_query(ctx, [pod("a-0")], 300_000, (t0 - 1000, t0 + 10**9))
        assert q.window == (t0 - 1000, t0 + 300_000)

    def test_empty(self, fig2_tree):
        with pytest.raises(PreconditionError):
            infer_query(ReasoningContext.for_tree(fig2_tree), [], 300_000)

    def test_query_tuple_validation(self):
        with pytest.raises(PreconditionError):
            QueryTuple((), (0, 1))
        with pytest.raises(PreconditionError):
            QueryTuple(("a",), (5, 5))


class TestVerify:
    def test_frontend_discarded_and_service_first(self):
        cands = [pod("frontend2-0"), pod("recommendationservice2-0"),
                 CandidateComponent("recommendationservice", "service", "s5")]
        ok, bad = verify_with_metrics(cands, [seg("recommendationservice2-0", 4), seg("recommendationservice", 7)])
        assert [c.id for c in ok] == ["recommendationservice", "recommendationservice2-0"]
        assert [c.id for c in bad] == ["frontend2-0"]
        assert ok[0].confirmation.peak_z == 7

    def test_none_matched(self):
        ok, bad = verify_with_metrics([pod("a-0"), pod("b-0")], [seg("c-0", 9)])
        assert ok == [] and [c.id for c in bad] == ["a-0", "b-0"]

    def test_strongest_segment_kept(self):
        ok, _ = verify_with_metrics([pod("a-0")], [seg("a-0", 4, "cpu"), seg("a-0", 9, "memory")])
        assert ok[0].confirmation.kpi_name == "memory"


class TestReport:
    def test_confirmed_head(self):
        ok, _ = verify_with_metrics(
            [CandidateComponent("recommendationservice", "service", "s5", path=("frontend2-0", "recommendationservice2-0")),
             pod("recommendationservice2-0")],
            [seg("recommendationservice", 7), seg("recommendationservice2-0", 4)],
        )
        r = format_report(ok)
        assert r.root_cause == "recommendationservice"
        assert r.reason.startswith("path: frontend2-0 -> recommendationservice2-0 -> recommendationservice; ")
        assert "metric signal: network_tx peak z=7.00" in r.reason

    def test_unverified_fallback(self):
        r = format_report([], [], [CandidateComponent("emailservice", "service", "s9", signal="duration=1us")])
        assert r.root_cause == "emailservice" and "unverified by metrics" in r.reason

    def test_unknown(self):
        assert format_report([], ["looked at s1"]).root_cause == UNKNOWN

    def test_report_dict_contract(self):
        r = RootCauseReport("x", "y")
        assert RootCauseReport.from_dict(r.to_dict()) == r
        assert r.to_json() == '{"root_cause": "x", "reason": "y"}'
        with pytest.raises(ValueError):
            RootCauseReport.from_dict({"root_cause": "x", "reason": "y", "extra": 1})

    def test_candidate_dimension_checked(self):
        with pytest.raises(ValueError):
            CandidateComponent("x", "cluster", "s1")
