"""Command-line entry point.

Exit codes: 0 success, 1 input error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import io
import json
import sys
from pathlib import Path

from . import harness
from .dataset import (
    ingest,
    load_synthetic_specs,
    replay_workloads,
    synthesize,
    write_trace,
)
from .errors import InputError
from .optimizer import Budget, Constraint, ProfilingSession, run_session
from .repository import Repository, load
from .space import MachineTable


def _machines(path) -> MachineTable:
    return MachineTable.from_csv(path) if path else MachineTable.default()


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def cmd_ingest(args) -> int:
    result = ingest(args.trace, MachineTable.from_csv(args.specs))
    workloads = sorted({r.workload_id for r in result.records})
    if args.repo:
        repo = load(args.repo) if Path(args.repo).exists() else Repository(args.repo)
        repo.extend(result.records)
    _emit(harness.dump_json({
        "records": len(result.records),
        "workloads": workloads,
        "incomplete": sum(1 for r in result.rows if not r.completed),
        "missingSamples": result.missing_samples,
    }), args.out)
    return 0


def cmd_synth(args) -> int:
    machines = _machines(args.machines)
    rows = []
    for spec in load_synthetic_specs(args.spec_file):
        workload = synthesize(spec, machines=machines)
        rows += [workload.trace_row(c) for c in workload.space]
    buf = io.StringIO()
    write_trace(rows, buf)
    _emit(buf.getvalue(), args.out)
    return 0


def _workload(args):
    machines = _machines(args.machines)
    if args.trace:
        pool = replay_workloads(ingest(args.trace, machines))
    elif args.workload:
        pool = [synthesize(s, machines=machines) for s in load_synthetic_specs(args.workload)]
    else:
        raise InputError("profile needs --workload <spec-file> or --trace <file>")
    by_id = {w.workload_id: w for w in pool}
    wid = args.workload_id or (pool[0].workload_id if len(pool) == 1 else None)
    if wid not in by_id:
        raise InputError(f"choose one of {sorted(by_id)} with --workload-id")
    return by_id[wid]


def cmd_profile(args) -> int:
    objectives = tuple(o.strip() for o in args.objective.split(",") if o.strip())
    workload = _workload(args)
    if args.repo:
        store = load(args.repo) if Path(args.repo).exists() else Repository(args.repo)
    else:
        store = Repository()
    constraints = () if args.runtime_target is None else (Constraint(args.runtime_target),)
    if args.runtime_target is not None and args.runtime_target <= 0:
        raise InputError("--runtime-target must be positive")
    session = ProfilingSession(
        args.session_id or workload.workload_id,
        workload.space,
        objectives=objectives,
        constraints=constraints,
        budget=Budget(max_runs=args.max_runs, min_runs=args.min_runs),
        support_count=args.models,
        rng_seed=args.seed,
    )
    if session.workload_id in store:
        raise InputError(f"session id {session.workload_id!r} already exists in the repository")
    result = run_session(workload, session, store, use_transfer=not args.no_karasu)
    runs = []
    for record, proposal in zip(result.history, result.proposals):
        runs.append({
            "iteration": record.sequence,
            "config": record.config.to_dict(),
            "measures": record.measures.to_dict(),
            "feasible": session.is_feasible(record),
            "kind": proposal.kind,
            "score": proposal.score,
        })
    _emit(harness.dump_json({
        "sessionId": session.workload_id,
        "objectives": list(objectives),
        "runtimeTarget": args.runtime_target,
        "karasu": not args.no_karasu,
        "seed": args.seed,
        "runs": runs,
        "bestFeasible": list(result.best_feasible) if result.best_feasible else None,
        "lastWeights": session.last_weights,
        "stoppedAt": result.stopped_at,
        "stopReason": result.stop_reason,
    }), args.out)
    return 0


def cmd_experiment(args) -> int:
    plan, workloads = harness.load_plan(args.plan)
    if args.seed is not None:
        plan.seed = args.seed
    result = harness.run_experiment(plan, workloads)
    results, summary = harness.write_experiment(result, args.out)
    print(f"{len(result.rows)} rows -> {results}; summary -> {summary}")
    return 0


def _locate(results: Path) -> tuple[Path, Path]:
    if results.is_dir():
        return results / "results.csv", results / "summary.json"
    return results, results.with_name("summary.json")


def cmd_report(args) -> int:
    results, summary_path = _locate(Path(args.results))
    if args.optima:
        summary_path = Path(args.optima)
    rows = harness.read_rows(results)
    try:
        prior = json.loads(summary_path.read_text())
        optima = prior["optima"]
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise InputError(f"{summary_path}: cannot read cell optima ({exc})") from exc
    max_runs = max((r.iteration for r in rows), default=0)
    if "plan" in prior:
        max_runs = max(max_runs, prior["plan"].get("maxRuns", 0))
    summary = harness.summarize(rows, optima, max_runs)
    if args.summary:
        _emit(harness.dump_json(summary), args.out)
        return 0
    buf = io.StringIO()
    buf.write("method,iteration,sessions,withinFraction,atOptimumFraction,meanHypervolume\n")
    for method, entry in summary["methods"].items():
        for i in range(max_runs):
            hv = entry.get("meanHypervolume")
            buf.write(",".join([
                method, str(i + 1), str(entry["sessions"]), repr(entry["withinFraction"][i]),
                repr(entry["atOptimumFraction"][i]), "" if hv is None else repr(hv[i]),
            ]) + "\n")
    _emit(buf.getvalue(), args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cotune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a trace and derive shareable run records")
    p.add_argument("trace")
    p.add_argument("specs", help="machine specs table (CSV)")
    p.add_argument("--repo", help="append the records to this repository directory")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="evaluate synthetic workloads on every configuration")
    p.add_argument("spec_file")
    p.add_argument("--machines")
    p.add_argument("--out", help="trace CSV path (default stdout)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("profile", help="run one profiling session")
    p.add_argument("--objective", default="cost")
    p.add_argument("--runtime-target", type=float)
    p.add_argument("--models", type=int, default=3)
    p.add_argument("--no-karasu", action="store_true", help="baseline optimizer without transfer")
    p.add_argument("--repo", help="shared repository directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workload", help="synthetic workload spec file")
    p.add_argument("--trace", help="trace file to replay")
    p.add_argument("--machines")
    p.add_argument("--workload-id")
    p.add_argument("--session-id")
    p.add_argument("--max-runs", type=int, default=20)
    p.add_argument("--min-runs", type=int, default=6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("experiment", help="run an experiment plan")
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", help="plot-ready tables from experiment results")
    p.add_argument("results", help="results.csv or the experiment output directory")
    p.add_argument("--summary", action="store_true", help="emit the JSON summary instead")
    p.add_argument("--optima", help="summary.json holding the cell optima")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # usage errors are input errors
        return 1 if exc.code else 0
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        print(f"failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
