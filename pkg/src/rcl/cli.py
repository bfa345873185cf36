"""Command-line entry point: ``rcl {simulate,localize,batch,eval}``.

Exit codes
----------
==  ==========================================================
0   success
1   unexpected internal error
2   usage error (bad flags)
3   spec or configuration error
4   input could not be parsed (records, traces, schemas)
5   trace or span not found
6   request is not abnormal (rerun with ``--force``)
7   LLM transport failure
8   LLM produced unusable output or ran out of steps
9   I/O error
==  ==========================================================
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .coordinator import Coordinator, Dataset, PipelineConfig, PipelineResult
from .errors import (
    LLMError,
    LLMTransportError,
    MalformedTraceError,
    NotAbnormalError,
    RecordParseError,
    SpanNotFoundError,
    SpecError,
)
from .evaluation import (
    DEFAULT_GROUP_WINDOW_MS,
    EvalInstance,
    group_requests,
    load_ground_truth,
    majority_vote,
    summarize,
)
from .llm_backend import DEFAULT_MAX_STEPS, HTTPChatBackend, RecordedBackend
from .metrics_store import DEFAULT_DELTA_MS, DEFAULT_N_SIGMA, ComponentTopology
from .simulator import generate, load_spec, scenario_figure2, scenario_figure3
from .trace_model import DEFAULT_ABNORMAL_FACTOR

logger = logging.getLogger("rcl")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_SPEC = 3
EXIT_PARSE = 4
EXIT_NOT_FOUND = 5
EXIT_NOT_ABNORMAL = 6
EXIT_LLM_TRANSPORT = 7
EXIT_LLM_OUTPUT = 8
EXIT_IO = 9

# most specific first
_EXIT_FOR = (
    (SpecError, EXIT_SPEC),
    (NotAbnormalError, EXIT_NOT_ABNORMAL),
    (SpanNotFoundError, EXIT_NOT_FOUND),
    ((RecordParseError, MalformedTraceError, json.JSONDecodeError), EXIT_PARSE),
    (LLMTransportError, EXIT_LLM_TRANSPORT),
    (LLMError, EXIT_LLM_OUTPUT),
    (OSError, EXIT_IO),
)

SCENARIOS = {"figure2": scenario_figure2, "figure3": scenario_figure3}
DATA_FILES = ("traces.csv", "traces.jsonl", "metrics.csv", "topology.csv", "baselines.csv")


def exit_code_for(exc: BaseException) -> int:
    for kinds, code in _EXIT_FOR:
        if isinstance(exc, kinds):
            return code
    if isinstance(exc, ValueError):  # schema mismatches surface as ValueError
        return EXIT_PARSE
    return EXIT_INTERNAL


# --------------------------------------------------------------------------- manifest


def _now() -> str:
    """UTC timestamp; honours SOURCE_DATE_EPOCH so runs can be made byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    ts = datetime.fromtimestamp(int(epoch), timezone.utc) if epoch else datetime.now(timezone.utc)
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def input_digests(*paths: str | Path | None) -> dict[str, str]:
    out: dict[str, str] = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            for name in DATA_FILES:
                if (p / name).exists():
                    out[str(p / name)] = file_digest(p / name)
        elif p.exists():
            out[str(p)] = file_digest(p)
    return out


def build_manifest(command: str, config: dict[str, Any], inputs: dict[str, str], seed: int | None,
                   started: str) -> dict[str, Any]:
    return {
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "version": __version__,
        "started_at": started,
        "finished_at": _now(),
    }


def write_manifest(target: Path, manifest: dict[str, Any], outputs: dict[str, str] | None = None) -> Path:
    """Write ``manifest.json`` into a directory, or ``<file>.manifest.json`` beside a file."""
    path = target / "manifest.json" if target.is_dir() else target.with_name(target.name + ".manifest.json")
    body = dict(manifest)
    if outputs is not None:
        body["outputs"] = outputs
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------- shared


def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    kw: dict[str, Any] = dict(
        policy=args.policy,
        n=args.n_sigma,
        delta=args.delta,
        factor=args.factor,
        seed=args.seed,
        force=getattr(args, "force", False),
    )
    if args.max_steps is not None:
        kw.update(max_steps=args.max_steps, max_assessed=args.max_steps, max_reflection_steps=args.max_steps)
    try:
        return PipelineConfig(**kw)
    except ValueError as exc:
        raise SpecError(str(exc)) from exc


def _backend(args: argparse.Namespace):
    if args.policy != "llm":
        return None
    if args.llm_fixture:
        return RecordedBackend.from_file(args.llm_fixture)
    return HTTPChatBackend.from_env()


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--policy", choices=("deterministic", "llm"), default="deterministic")
    p.add_argument("--n-sigma", type=float, default=DEFAULT_N_SIGMA, help="fluctuation threshold (default 3)")
    p.add_argument("--delta", type=int, default=DEFAULT_DELTA_MS, help="half-width of the metric query window, ms")
    p.add_argument("--factor", type=float, default=DEFAULT_ABNORMAL_FACTOR,
                   help="entry latency multiple of baseline that counts as abnormal")
    p.add_argument("--max-steps", type=int, default=None,
                   help=f"step budget per stage (LLM default {DEFAULT_MAX_STEPS}, deterministic 200)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("text", "structured"), default="structured")
    p.add_argument("--llm-fixture", default=None, help="recorded assistant replies to replay instead of a live model")
    p.add_argument("--force", action="store_true", help="localize even when the entry latency looks normal")
    p.add_argument("-o", "--out", default=None, help="write the report here instead of stdout")


def render_text(result: PipelineResult) -> str:
    lines = [
        f"trace: {result.trace_id}",
        f"root cause: {result.report.root_cause}",
        f"report: {result.report.to_json()}",
    ]
    for stage in ("S0", "S1"):
        rep = result.stage_report(stage)
        lines.append(f"{stage}: {rep.root_cause if rep else '-'}")
    lines.append("trail:")
    for s in result.trail:
        lines.append(f"  {s.step:>3} [{s.stage}] {s.agent:<6} {s.focus}: {s.decision}")
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------- commands


def cmd_simulate(args: argparse.Namespace) -> int:
    started = _now()
    if args.scenario:
        bundle = SCENARIOS[args.scenario](args.seed)
        inputs: dict[str, str] = {}
    else:
        topo, workload, faults, spec_seed = load_spec(Path(args.spec))
        seed = args.seed if args.seed is not None else spec_seed
        args.seed = seed
        bundle = generate(topo, workload, faults, seed)
        inputs = input_digests(args.spec)
    out = Path(args.out)
    digests = bundle.write(out)
    manifest = build_manifest(
        "simulate", {"scenario": args.scenario, "spec": args.spec}, inputs, args.seed, started
    )
    write_manifest(out, manifest, digests)
    logger.info("wrote %d spans, %d labeled traces to %s", len(bundle.spans), len(bundle.ground_truth), out)
    return EXIT_OK


def cmd_localize(args: argparse.Namespace) -> int:
    started = _now()
    config = _pipeline_config(args)
    dataset = Dataset.load(args.data_dir)
    result = Coordinator(dataset, config, backend=_backend(args)).localize_request(args.trace_id)
    manifest = build_manifest(
        "localize",
        {**config.to_dict(), "trace_id": args.trace_id},
        input_digests(args.data_dir, args.llm_fixture),
        args.seed,
        started,
    )
    if args.format == "structured":
        body = result.to_dict()
        body["manifest"] = manifest
        text = json.dumps(body, indent=2, sort_keys=True, ensure_ascii=False) + "\n"
    else:
        text = render_text(result) + f"manifest: {json.dumps(manifest, sort_keys=True)}\n"
    _emit(text, args.out)
    if args.out:
        write_manifest(Path(args.out), manifest, {args.out: file_digest(args.out)})
    return EXIT_OK


def _request_record(result: PipelineResult, timestamp: int) -> dict[str, Any]:
    return {
        "kind": "request",
        "trace_id": result.trace_id,
        "timestamp": timestamp,
        "root_cause": result.report.root_cause,
        "reason": result.report.reason,
        "ranked": [c.id for c in result.stages["Rf"].candidates] or [result.report.root_cause],
    }


def cmd_batch(args: argparse.Namespace) -> int:
    started = _now()
    config = _pipeline_config(args)
    dataset = Dataset.load(args.data_dir)
    backend = _backend(args)
    coord = Coordinator(dataset, config, backend=backend)
    trace_ids = dataset.trace_ids if config.force else dataset.abnormal_traces(config.factor)
    if not trace_ids:
        logger.warning("no abnormal requests found in %s", args.data_dir)
    jobs = 1 if backend is not None else max(1, args.jobs)  # a replayed transcript is sequential

    def run(tid: str) -> dict[str, Any]:
        res = coord.localize_request(tid)
        return _request_record(res, dataset.tree(tid).entry.timestamp)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(run, trace_ids))
    else:
        records = [run(t) for t in trace_ids]
    records.sort(key=lambda r: r["trace_id"])

    groups = []
    if args.vote and records:
        by_id = {r["trace_id"]: r for r in records}
        for i, members in enumerate(group_requests([(r["trace_id"], r["timestamp"]) for r in records], args.window)):
            ids = [m[0] for m in members]
            tally = majority_vote([by_id[t]["root_cause"] for t in ids])
            gid = f"g{i:04d}"
            for t in ids:
                by_id[t]["group_id"] = gid
            groups.append({
                "kind": "group",
                "group_id": gid,
                "trace_ids": sorted(ids),
                "start": members[0][1],
                "root_cause": tally.head,
                "ranked": tally.ordering,
                "votes": tally.to_list(),
            })

    manifest = build_manifest(
        "batch",
        {**config.to_dict(), "window": args.window, "vote": args.vote, "jobs": args.jobs},
        input_digests(args.data_dir, args.llm_fixture),
        args.seed,
        started,
    )
    if args.format == "structured":
        lines = [json.dumps(r, sort_keys=True, ensure_ascii=False) for r in [*records, *groups]]
        lines.append(json.dumps({"kind": "manifest", "manifest": manifest}, sort_keys=True))
        text = "\n".join(lines) + "\n"
    else:
        out = [f"{r['trace_id']}: {r['root_cause']}" for r in records]
        out += [f"{g['group_id']} ({len(g['trace_ids'])} requests): {g['root_cause']} votes={g['votes']}" for g in groups]
        text = "\n".join(out) + ("\n" if out else "")
    _emit(text, args.out)
    if args.out:
        write_manifest(Path(args.out), manifest, {args.out: file_digest(args.out)})
    return EXIT_OK


def load_results(path: str | Path) -> dict[str, list[str]]:
    """Rankings keyed by trace_id and group_id from a batch JSONL (or a JSON list)."""
    text = Path(path).read_text()
    stripped = text.lstrip()
    rows = json.loads(text) if stripped.startswith("[") else [json.loads(l) for l in text.splitlines() if l.strip()]
    out: dict[str, list[str]] = {}
    for row in rows:
        if not isinstance(row, dict) or row.get("kind") == "manifest":
            continue
        ranked = row.get("ranked") or ([row["root_cause"]] if row.get("root_cause") else None)
        key = row.get("group_id") if row.get("kind") == "group" else row.get("trace_id")
        if key is None or ranked is None:
            raise ValueError(f"{path}: result rows need trace_id/group_id and ranked or root_cause")
        out[str(key)] = [str(x) for x in ranked]
    return out


def cmd_eval(args: argparse.Namespace) -> int:
    started = _now()
    results = load_results(args.results)
    truth = load_ground_truth(args.ground_truth)
    topology = ComponentTopology.from_csv(args.topology) if args.topology else None
    instances = [EvalInstance.build(results.get(k, []), v, topology) for k, v in sorted(truth.items())]
    missing = sum(1 for k in truth if k not in results)
    if missing:
        logger.warning("%d ground-truth entries have no prediction and count as misses", missing)
    summary = summarize(instances)
    manifest = build_manifest(
        "eval", {"topology": args.topology}, input_digests(args.results, args.ground_truth, args.topology),
        None, started,
    )
    if args.format == "structured":
        body = {"summary": summary, "missing": missing, "manifest": manifest}
        text = json.dumps(body, indent=2, sort_keys=True) + "\n"
    else:
        text = "".join(
            f"{k}: {v:.4f}\n" if isinstance(v, float) and not math.isinf(v) else f"{k}: {v}\n"
            for k, v in summary.items()
        )
    _emit(text, args.out)
    if args.out:
        write_manifest(Path(args.out), manifest, {args.out: file_digest(args.out)})
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcl", description=__doc__.split("\n")[0],
                                     epilog="exit codes: 0 ok, 3 spec, 4 parse, 5 not found, "
                                            "6 not abnormal, 7 LLM transport, 8 LLM output, 9 I/O")
    parser.add_argument("--version", action="version", version=f"rcl {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a labeled trace/metric dataset")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--spec", help="simulator spec (JSON)")
    src.add_argument("--scenario", choices=sorted(SCENARIOS), help="built-in scenario")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="overrides the seed stored in the spec file (default 0)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("localize", help="localize the root cause of one request")
    p.add_argument("data_dir")
    p.add_argument("trace_id")
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("batch", help="localize every abnormal request and vote per time window")
    p.add_argument("data_dir")
    _add_pipeline_flags(p)
    p.add_argument("--window", type=int, default=DEFAULT_GROUP_WINDOW_MS, help="grouping window, ms")
    p.add_argument("--vote", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_batch)

    p = sub.add_parser("eval", help="score results against ground truth")
    p.add_argument("results")
    p.add_argument("ground_truth")
    p.add_argument("--topology", default=None, help="topology CSV enabling pod-to-service credit")
    p.add_argument("--format", choices=("text", "structured"), default="structured")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "simulate" and args.seed is None and args.scenario:
        args.seed = 0
    t = time.perf_counter()
    try:
        code = args.func(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = exit_code_for(exc)
        if code == EXIT_INTERNAL:
            logger.exception("internal error")
        print(f"rcl {args.command}: error: {exc}", file=sys.stderr)
        return code
    logger.debug("%s finished in %.2fs", args.command, time.perf_counter() - t)
    return code
