"""Simulate a handful of fault episodes, localize every faulty request,
vote within time groups and score against the labels.

Run with:  python demos/batch_and_score.py [n_seeds]
"""
import sys
import time
from collections import Counter

from rcl import localize_request
from rcl.evaluation import EvalInstance, group_requests, majority_vote, summarize
from rcl.simulator import FAULT_KINDS, random_episode

n_seeds = int(sys.argv[1]) if len(sys.argv) > 1 else 2

per_request, per_group = [], []
misses = Counter()
t_start = time.perf_counter()
for target in ("pod", "service", "node"):
    for kind in FAULT_KINDS:
        for seed in range(n_seeds):
            b = random_episode(seed, target, kind)
            data = b.dataset()
            stamps = {t: data.tree(t).entry.timestamp for t in b.labeled_traces}
            verdicts = {}
            for t in b.labeled_traces:
                res = localize_request(t, data)
                verdicts[t] = res.report.root_cause
                truth = b.truth_for(t).root_cause
                inst = EvalInstance.build([res.report.root_cause], truth, b.topology)
                per_request.append(inst)
                if inst.rank != 1:
                    misses[(target, kind)] += 1
            for group in group_requests(stamps.items()):
                tally = majority_vote([verdicts[t] for t, _ in group])
                truth = b.truth_for(group[0][0]).root_cause
                per_group.append(EvalInstance.build(tally.ordering, truth, b.topology))

print(f"{len(per_request)} requests, {len(per_group)} groups in {time.perf_counter() - t_start:.1f}s")
print("per request:", summarize(per_request))
print("per group  :", summarize(per_group))
if misses:
    print("misses by (target, kind):", dict(misses))
