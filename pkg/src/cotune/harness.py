"""Experiment orchestration: repository building, scenario rules, result tables.

An experiment runs in two phases. Phase one profiles every
(workload, percentile, repetition) cell with the baseline optimizer for the
full budget; those sessions form the shared repository, and each one cut at
its first stop decision is also the baseline result for that cell. Phase two
runs the transfer-learning optimizer on every cell against a store view
chosen by the scenario.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import acquisition as acq
from .dataset import Workload, ingest, parse_synthetic_specs, replay_workloads, synthesize
from .errors import InputError
from .optimizer import Budget, Constraint, ProfilingSession, run_session
from .repository import Repository, RunRecord
from .space import MachineTable

SCENARIOS = ("boost", "cases", "heterogeneous", "moo")
CASES = ("A", "B", "C", "D", "none")
DEFAULT_PERCENTILES = (0.1, 0.3, 0.5, 0.7, 0.9)
BASELINE = "baseline"
WITHIN_FRACTION = 0.25
OPTIMUM_RTOL = 1e-9

RESULT_COLUMNS = (
    "scenario",
    "workloadId",
    "percentile",
    "repetition",
    "iteration",
    "method",
    "bestFeasibleCost",
    "bestFeasibleEnergy",
    "cumulativeSearchCost",
    "cumulativeSearchTimeS",
    "timeoutCount",
    "hypervolume",
    "stoppedAt",
    "stopReason",
)


@dataclass
class ExperimentPlan:
    scenario: str
    runtime_percentiles: tuple[float, ...] = DEFAULT_PERCENTILES
    repetitions: int = 10
    model_counts: tuple[int, ...] = (1, 2, 3)
    case_filter: str = "none"
    seed: int = 0
    max_runs: int = 20
    min_runs: int = 6

    def __post_init__(self):
        self.runtime_percentiles = tuple(float(p) for p in self.runtime_percentiles)
        self.model_counts = tuple(int(k) for k in self.model_counts)
        if self.scenario not in SCENARIOS:
            raise InputError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.case_filter not in CASES:
            raise InputError(f"caseFilter must be one of {CASES}, got {self.case_filter!r}")
        p = np.array(self.runtime_percentiles)
        if p.size == 0 or np.any(p <= 0) or np.any(p >= 1) or np.any(np.diff(p) <= 0):
            raise InputError("percentiles must be strictly increasing and inside (0, 1)")
        if self.repetitions < 1:
            raise InputError("repetitions must be >= 1")
        if not self.model_counts or min(self.model_counts) < 1:
            raise InputError("modelCounts must hold positive integers")
        if not 1 <= self.min_runs <= self.max_runs:
            raise InputError("need 1 <= minRuns <= maxRuns")

    @property
    def objectives(self) -> tuple[str, ...]:
        return ("cost", "energy") if self.scenario == "moo" else ("cost",)

    @property
    def methods(self) -> list[str]:
        return [BASELINE] + [f"karasu-{k}" for k in self.model_counts]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        keys = {
            "scenario": "scenario",
            "runtimePercentiles": "runtime_percentiles",
            "repetitions": "repetitions",
            "modelCounts": "model_counts",
            "caseFilter": "case_filter",
            "seed": "seed",
            "maxRuns": "max_runs",
            "minRuns": "min_runs",
        }
        if "scenario" not in d:
            raise InputError("plan lacks 'scenario'")
        return cls(**{keys[k]: v for k, v in d.items() if k in keys})


@dataclass
class ResultRow:
    scenario: str
    workload_id: str
    percentile: float
    repetition: int
    iteration: int
    method: str
    best_feasible_cost: Optional[float]
    best_feasible_energy: Optional[float]
    cumulative_search_cost: float
    cumulative_search_time_s: float
    timeout_count: int
    hypervolume: Optional[float]
    stopped_at: int
    stop_reason: str

    def values(self) -> list:
        return [
            self.scenario, self.workload_id, self.percentile, self.repetition, self.iteration,
            self.method, self.best_feasible_cost, self.best_feasible_energy,
            self.cumulative_search_cost, self.cumulative_search_time_s, self.timeout_count,
            self.hypervolume, self.stopped_at, self.stop_reason,
        ]


@dataclass(frozen=True)
class CellOptimum:
    """Exhaustive ground truth for one (workload, percentile) cell."""

    runtime_target: float
    optimal_cost: float
    optimal_energy: float
    reference_point: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "runtimeTarget": self.runtime_target,
            "optimalCost": self.optimal_cost,
            "optimalEnergy": self.optimal_energy,
            "referencePoint": list(self.reference_point),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellOptimum":
        return cls(d["runtimeTarget"], d["optimalCost"], d["optimalEnergy"], tuple(d["referencePoint"]))


@dataclass
class ExperimentResult:
    rows: list[ResultRow]
    summary: dict
    repository: Repository = field(repr=False, default_factory=Repository)


def compute_runtime_target(workload_runs: Sequence[RunRecord], percentile: float,
                           completed: Optional[Sequence[bool]] = None) -> float:
    """Runtime at ``percentile`` of the completed runs (linear interpolation)."""
    if not 0.0 <= percentile <= 1.0:
        raise InputError(f"percentile must be in [0, 1], got {percentile}")
    flags = [True] * len(workload_runs) if completed is None else list(completed)
    runtimes = [r.measures.runtime_s for r, ok in zip(workload_runs, flags) if ok]
    if not runtimes:
        raise InputError("no completed runs to derive a runtime target from")
    return float(np.percentile(runtimes, 100.0 * percentile))


def apply_case_filter(candidates: Mapping[str, dict], target: dict, case: str) -> list[str]:
    """Candidate ids whose framework/algorithm/dataset relation to ``target``
    matches the case (A: all differ, B: same framework only, C: same framework
    and algorithm, D: all same)."""
    if case not in CASES:
        raise InputError(f"unknown case {case!r}")
    out = []
    for wid in sorted(candidates):
        meta = candidates[wid]
        same = tuple(meta.get(k) == target.get(k) for k in ("framework", "algorithm", "dataset"))
        keep = {
            "A": same == (False, False, False),
            "B": same == (True, False, False),
            "C": same == (True, True, False),
            "D": same == (True, True, True),
            "none": True,
        }[case]
        if keep:
            out.append(wid)
    return out


def truncate_heterogeneous(store: Repository, seed) -> Repository:
    """Keep the first k runs of each workload, k ~ Uniform{3, ..., n}."""
    rng = np.random.default_rng(seed)
    keep = {}
    for wid in store.workloads():
        n = len(store.runs(wid))
        if n >= 3:
            keep[wid] = int(rng.integers(3, n + 1))
    return store.truncated(keep)


def cell_optimum(workload: Workload, percentile: float) -> CellOptimum:
    table = workload.table()
    completed = [workload.completed(r.config) for r in table]
    target = compute_runtime_target(table, percentile, completed)
    feasible = [r for r, ok in zip(table, completed) if ok and r.measures.runtime_s <= target]
    costs = np.array([r.measures.cost_usd for r in feasible])
    energies = np.array([r.measures.energy_wh for r in feasible])
    ref = (float(costs.max() * acq.REFERENCE_MARGIN), float(energies.max() * acq.REFERENCE_MARGIN))
    return CellOptimum(target, float(costs.min()), float(energies.min()), ref)


def _cell_seed(plan: ExperimentPlan, *tags: int) -> int:
    return int(np.random.SeedSequence([plan.seed, *tags]).generate_state(1)[0])


def _session_rows(plan, workload, pct, rep, method, optimum, history, result) -> list[ResultRow]:
    rows = []
    best_cost = best_energy = None
    front = []
    cost_sum = time_sum = 0.0
    timeouts = 0
    for i, record in enumerate(history[: result.stopped_at], start=1):
        m = record.measures
        cost_sum += m.cost_usd
        time_sum += m.runtime_s
        if workload.completed(record.config) and m.runtime_s <= optimum.runtime_target:
            best_cost = m.cost_usd if best_cost is None else min(best_cost, m.cost_usd)
            best_energy = m.energy_wh if best_energy is None else min(best_energy, m.energy_wh)
            front.append((m.cost_usd, m.energy_wh))
        else:
            timeouts += 1
        hv = acq.hypervolume_2d(np.array(front).reshape(-1, 2), optimum.reference_point) if plan.scenario == "moo" else None
        rows.append(ResultRow(
            plan.scenario, workload.workload_id, pct, rep, i, method, best_cost, best_energy,
            cost_sum, time_sum, timeouts, hv, result.stopped_at, result.stop_reason,
        ))
    return rows


def _support_view(plan, store, cells, cell, k, workloads) -> tuple[Repository, Optional[list[str]]]:
    """Store view and pinned support ids for one transfer session."""
    wi, pi, rep = cell
    own = cells[cell]
    if plan.scenario == "boost":
        pool = sorted(sid for (w, p, r), sid in cells.items() if w == wi and p != pi)
        rng = np.random.default_rng(_cell_seed(plan, 2, wi, pi, rep, k))
        chosen = sorted(rng.choice(pool, size=min(k, len(pool)), replace=False).tolist()) if pool else []
        return store.view(chosen), chosen
    meta = {sid: workloads[w].metadata for (w, p, r), sid in cells.items() if sid != own}
    case = plan.case_filter if plan.scenario == "cases" else "none"
    ids = apply_case_filter(meta, workloads[wi].metadata, case)
    view = store.view(ids)
    if plan.scenario == "heterogeneous":
        view = truncate_heterogeneous(view, _cell_seed(plan, 3, wi, pi, rep))
    return view, None


def run_experiment(plan: ExperimentPlan, workloads: Sequence[Workload]) -> ExperimentResult:
    workloads = list(workloads)
    if not workloads:
        raise InputError("experiment needs at least one workload")
    optima = {(wi, pi): cell_optimum(w, p)
              for wi, w in enumerate(workloads) for pi, p in enumerate(plan.runtime_percentiles)}
    budget = Budget(max_runs=plan.max_runs, min_runs=plan.min_runs)
    cells = {}
    for wi, w in enumerate(workloads):
        for pi in range(len(plan.runtime_percentiles)):
            for rep in range(plan.repetitions):
                cells[(wi, pi, rep)] = f"{w.workload_id}.p{pi}.r{rep}"

    def session(sid, cell, **kw):
        return ProfilingSession(
            sid, workloads[cell[0]].space, objectives=plan.objectives,
            constraints=(Constraint(optima[cell[:2]].runtime_target),),
            budget=budget, rng_seed=_cell_seed(plan, 1, *cell), **kw,
        )

    store = Repository()
    rows = []
    for cell, sid in cells.items():
        s = session(sid, cell)
        result = run_session(workloads[cell[0]], s, store, use_transfer=False, exhaust=True)
        rows += _session_rows(plan, workloads[cell[0]], plan.runtime_percentiles[cell[1]], cell[2],
                              BASELINE, optima[cell[:2]], s.history, result)
    for k in plan.model_counts:
        method = f"karasu-{k}"
        for cell, sid in cells.items():
            view, pinned = _support_view(plan, store, cells, cell, k, workloads)
            s = session(f"{sid}.{method}", cell, support_count=k, support_ids=pinned)
            result = run_session(workloads[cell[0]], s, view, use_transfer=True)
            rows += _session_rows(plan, workloads[cell[0]], plan.runtime_percentiles[cell[1]], cell[2],
                                  method, optima[cell[:2]], s.history, result)
    opt_doc = {_cell_key(workloads[wi].workload_id, plan.runtime_percentiles[pi]): o.to_dict()
               for (wi, pi), o in optima.items()}
    summary = summarize(rows, opt_doc, plan.max_runs)
    summary["plan"] = plan_to_dict(plan)
    return ExperimentResult(rows, summary, store)


def plan_to_dict(plan: ExperimentPlan) -> dict:
    return {
        "scenario": plan.scenario,
        "runtimePercentiles": list(plan.runtime_percentiles),
        "repetitions": plan.repetitions,
        "modelCounts": list(plan.model_counts),
        "caseFilter": plan.case_filter,
        "seed": plan.seed,
        "maxRuns": plan.max_runs,
        "minRuns": plan.min_runs,
    }


def _cell_key(workload_id: str, percentile: float) -> str:
    return f"{workload_id}@{percentile!r}"


def summarize(rows: Sequence[ResultRow], optima: Mapping[str, dict], max_runs: int) -> dict:
    """Per-method statistics, computed from the rows and the cell optima only.

    A session that stopped early keeps its final value for later iterations.
    """
    sessions: dict[tuple, list[ResultRow]] = {}
    for r in rows:
        sessions.setdefault((r.method, r.workload_id, r.percentile, r.repetition), []).append(r)
    methods: dict[str, list[list[ResultRow]]] = {}
    for key in sorted(sessions, key=lambda k: (k[0], k[1], k[2], k[3])):
        methods.setdefault(key[0], []).append(sorted(sessions[key], key=lambda r: r.iteration))
    out = {}
    for method, group in methods.items():
        within = np.zeros(max_runs)
        at_opt = np.zeros(max_runs)
        hv = np.zeros(max_runs)
        for srows in group:
            opt = optima[_cell_key(srows[0].workload_id, srows[0].percentile)]["optimalCost"]
            for i in range(max_runs):
                r = srows[min(i, len(srows) - 1)]
                if r.best_feasible_cost is not None:
                    within[i] += r.best_feasible_cost <= (1 + WITHIN_FRACTION) * opt
                    at_opt[i] += r.best_feasible_cost <= opt * (1 + OPTIMUM_RTOL)
                hv[i] += r.hypervolume or 0.0
        n = len(group)
        last = [s[-1] for s in group]
        entry = {
            "sessions": n,
            "withinFraction": (within / n).tolist(),
            "atOptimumFraction": (at_opt / n).tolist(),
            "meanCumulativeSearchCost": float(np.mean([r.cumulative_search_cost for r in last])),
            "meanCumulativeSearchTimeS": float(np.mean([r.cumulative_search_time_s for r in last])),
            "meanTimeoutCount": float(np.mean([r.timeout_count for r in last])),
            "totalTimeoutCount": int(sum(r.timeout_count for r in last)),
            "meanStoppedAt": float(np.mean([r.stopped_at for r in last])),
        }
        if any(r.hypervolume is not None for r in last):
            entry["meanHypervolume"] = (hv / n).tolist()
        out[method] = entry
    return {"withinThreshold": WITHIN_FRACTION, "methods": out, "optima": dict(sorted(optima.items()))}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(RESULT_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(v) for v in r.values()])
    return buf.getvalue()


def read_rows(path: str | Path) -> list[ResultRow]:
    def num(v, kind=float):
        return None if v == "" else kind(v)

    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
                raise InputError(f"{path}: unexpected columns {reader.fieldnames}")
            return [
                ResultRow(
                    d["scenario"], d["workloadId"], float(d["percentile"]), int(d["repetition"]),
                    int(d["iteration"]), d["method"], num(d["bestFeasibleCost"]),
                    num(d["bestFeasibleEnergy"]), float(d["cumulativeSearchCost"]),
                    float(d["cumulativeSearchTimeS"]), int(d["timeoutCount"]), num(d["hypervolume"]),
                    int(d["stoppedAt"]), d["stopReason"],
                )
                for d in reader
            ]
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except (KeyError, ValueError) as exc:
        raise InputError(f"{path}: malformed result row ({exc})") from exc


def dump_json(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def write_experiment(result: ExperimentResult, out: str | Path) -> tuple[Path, Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results, summary = out / "results.csv", out / "summary.json"
    results.write_text(rows_to_csv(result.rows))
    summary.write_text(dump_json(result.summary))
    return results, summary


def load_plan(path: str | Path) -> tuple[ExperimentPlan, list[Workload]]:
    """Plan document plus its workloads.

    Workloads come from ``"workloads"`` (inline synthetic specs), from
    ``"specFile"`` or from ``"trace"`` with ``"machines"``; relative paths
    resolve against the plan's directory.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise InputError(f"{path}: plan must be a JSON object")
    plan = ExperimentPlan.from_dict(doc)
    base = path.parent
    machines = MachineTable.from_csv(base / doc["machines"]) if "machines" in doc else MachineTable.default()
    if "trace" in doc:
        workloads = replay_workloads(ingest(base / doc["trace"], machines))
    elif "workloads" in doc or "specFile" in doc:
        if "specFile" in doc:
            spec_path = base / doc["specFile"]
            try:
                specs_doc = json.loads(spec_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise InputError(f"{spec_path}: cannot read specs ({exc})") from exc
        else:
            specs_doc = doc["workloads"]
        workloads = [synthesize(s, machines=machines) for s in parse_synthetic_specs(specs_doc, str(path))]
    else:
        raise InputError(f"{path}: plan needs 'workloads', 'specFile' or 'trace'")
    return plan, workloads
