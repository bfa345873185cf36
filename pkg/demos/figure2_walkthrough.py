"""Walk through one failing request on the figure-2 style scenario.

A recommendation service starts misbehaving at minute 70. The frontend pod
looks guilty from the trace alone, but its metrics are flat, so the search
moves on and settles on the service whose network counters spiked.

Run with:  python demos/figure2_walkthrough.py
"""
import logging

from rcl import localize_request
from rcl.simulator import scenario_figure2

logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")

# %% build the bundle (traces, metrics, topology, baselines, labels)
bundle = scenario_figure2(seed=0)
data = bundle.dataset()
print(f"{len(data.trace_ids)} traces, {len(bundle.labeled_traces)} labelled as faulty")

trace_id = bundle.labeled_traces[0]
tree = data.tree(trace_id)
entry = tree.entry
print(f"entry span {entry.span_id} on {entry.cmdb_id}: {entry.duration} us, status {entry.status_code}")

# %% run the three stages
result = localize_request(trace_id, data)
for name in ("S0", "S1", "Rf"):
    stage = result.stages[name]
    print(f"{name:>2}: {stage.report.root_cause:<28} candidates={[c.id for c in stage.candidates][:4]}")

# %% the audit trail, one line per step
for step in result.trail:
    print(f"{step.step:>3} {step.stage:<3} {step.agent:<7} {step.focus:<12} {step.decision}")

verdicts = [s.metric_verdict for s in result.trail if s.metric_verdict]
for v in verdicts:
    print("confirmed:", [c["id"] for c in v["confirmed"]], " discarded:", v["discarded"])

print("\nfinal report:", result.report.to_dict())
print("ground truth:", bundle.truth_for(trace_id).root_cause)
