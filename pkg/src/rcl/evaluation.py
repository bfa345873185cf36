"""Majority voting over per-request verdicts and Recall@k / MRR scoring."""

from __future__ import annotations

import csv
import math
from collections import Counter
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

from .errors import PreconditionError
from .metrics_store import ComponentTopology

TOP_K_LIMIT = 10
DEFAULT_GROUP_WINDOW_MS = 300_000


@dataclass(frozen=True)
class VoteTally:
    ranked: tuple[tuple[str, int], ...]

    @property
    def head(self) -> str:
        return self.ranked[0][0]

    @property
    def ordering(self) -> list[str]:
        return [c for c, _ in self.ranked]

    @property
    def total(self) -> int:
        return sum(v for _, v in self.ranked)

    def to_list(self) -> list[list]:
        return [[c, v] for c, v in self.ranked]


def majority_vote(reports: Sequence[str]) -> VoteTally:
    """Count identical root-cause ids; ties keep first-appearance order."""
    if not reports:
        raise PreconditionError("majority_vote needs at least one report")
    counts = Counter(reports)  # insertion order == first appearance
    first = {r: i for i, r in reversed(list(enumerate(reports)))}
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], first[kv[0]]))
    return VoteTally(tuple(ranked))


def credit_match(predicted: str, truth: str, topology: ComponentTopology | None) -> bool:
    """Exact match, or a pod whose owning service is the truth (never the reverse)."""
    if predicted == truth:
        return True
    if topology is None:
        return False
    return topology.pod_to_service.get(predicted) == truth


@dataclass(frozen=True)
class EvalInstance:
    ranked_prediction: tuple[str, ...]
    truth: str
    rank: float  # 1-based; math.inf when absent from the top 10

    @classmethod
    def build(
        cls, ranked_prediction: Sequence[str], truth: str, topology: ComponentTopology | None = None
    ) -> EvalInstance:
        preds = tuple(ranked_prediction)
        return cls(preds, truth, rank_of(preds, truth, topology))


def rank_of(ranked: Sequence[str], truth: str, topology: ComponentTopology | None = None) -> float:
    for i, p in enumerate(ranked[:TOP_K_LIMIT], start=1):
        if credit_match(p, truth, topology):
            return i
    return math.inf


def recall_at_k(instances: Sequence[EvalInstance], k: int) -> float:
    if k < 1:
        raise ValueError("k must be at least 1")
    if not instances:
        raise PreconditionError("recall is undefined for zero instances")
    return sum(1 for i in instances if i.rank <= k) / len(instances)


def mrr(instances: Sequence[EvalInstance]) -> float:
    """Mean reciprocal rank; a truth outside the top 10 contributes 0."""
    if not instances:
        raise PreconditionError("MRR is undefined for zero instances")
    return sum(0.0 if math.isinf(i.rank) else 1.0 / i.rank for i in instances) / len(instances)


def summarize(instances: Sequence[EvalInstance]) -> dict[str, float | int]:
    return {
        "recall@1": recall_at_k(instances, 1),
        "recall@5": recall_at_k(instances, 5),
        "recall@10": recall_at_k(instances, 10),
        "mrr": mrr(instances),
        "n_instances": len(instances),
    }


def group_requests(
    entries: Iterable[tuple[str, int]], window: int = DEFAULT_GROUP_WINDOW_MS
) -> list[list[tuple[str, int]]]:
    """Split (trace_id, timestamp) pairs into groups opened by their first member.

    An entry joins the open group when it is at most ``window`` after the
    group's first timestamp; otherwise it opens a new group.
    """
    ordered = sorted(entries, key=lambda e: (e[1], e[0]))
    groups: list[list[tuple[str, int]]] = []
    for e in ordered:
        if groups and e[1] - groups[-1][0][1] <= window:
            groups[-1].append(e)
        else:
            groups.append([e])
    return groups


def load_ground_truth(path: str | Path) -> dict[str, str]:
    """Map trace/group id to root cause from ``root_cause_component`` or ``root_cause`` columns."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = set(reader.fieldnames or ())
        key = "trace_id" if "trace_id" in cols else "group_id" if "group_id" in cols else None
        val = "root_cause_component" if "root_cause_component" in cols else (
            "root_cause" if "root_cause" in cols else None
        )
        if key is None or val is None:
            raise ValueError(f"{path}: need trace_id and root_cause_component columns, got {sorted(cols)}")
        return {r[key]: r[val] for r in reader}
