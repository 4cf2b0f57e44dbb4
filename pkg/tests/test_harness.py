import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cotune.dataset import SyntheticWorkloadSpec, synthesize
from cotune.errors import InputError
from cotune.harness import (
    BASELINE,
    RESULT_COLUMNS,
    ExperimentPlan,
    apply_case_filter,
    cell_optimum,
    compute_runtime_target,
    load_plan,
    read_rows,
    run_experiment,
    summarize,
    truncate_heterogeneous,
    write_experiment,
)
from cotune.repository import Measures, MetricVector, Repository, RunRecord
from cotune.space import MachineTable, default_space

FLAT = MetricVector(((1, 2, 3),) * 6)
SPACE = default_space(MachineTable.default())


def runs_with(space, runtimes):
    return [RunRecord("w", c, FLAT, Measures(t, 1.0, 1.0)) for c, t in zip(space, runtimes)]


@given(st.lists(st.floats(1, 1e4), min_size=1, max_size=40), st.floats(0, 1))
def test_runtime_target_matches_sort_oracle(runtimes, p):
    got = compute_runtime_target(runs_with(SPACE, runtimes), p)
    s = sorted(runtimes)
    h = (len(s) - 1) * p
    lo = int(np.floor(h))
    hi = min(lo + 1, len(s) - 1)
    assert got == pytest.approx(s[lo] + (h - lo) * (s[hi] - s[lo]), rel=1e-12)


def test_runtime_target_edges(space):
    runtimes = [float(v) for v in range(10, 80)]
    runs = runs_with(space, runtimes)
    assert compute_runtime_target(runs, 1.0) == max(runtimes[: len(space)])
    tiny = compute_runtime_target(runs, 1e-6)
    assert sum(r.measures.runtime_s <= tiny for r in runs) == 1
    completed = [i % 2 == 0 for i in range(len(runs))]
    assert compute_runtime_target(runs, 1.0, completed) == max(r.measures.runtime_s for r, ok in zip(runs, completed) if ok)
    with pytest.raises(InputError):
        compute_runtime_target(runs, 1.5)
    with pytest.raises(InputError):
        compute_runtime_target(runs, 0.5, [False] * len(runs))


def test_case_filter_partitions_candidates():
    target = {"framework": "spark", "algorithm": "sort", "dataset": "d1"}
    candidates = {
        "a": {"framework": "hadoop", "algorithm": "grep", "dataset": "d9"},
        "b": {"framework": "spark", "algorithm": "grep", "dataset": "d9"},
        "c": {"framework": "spark", "algorithm": "sort", "dataset": "d9"},
        "d": {"framework": "spark", "algorithm": "sort", "dataset": "d1"},
        "e": {"framework": "hadoop", "algorithm": "sort", "dataset": "d1"},
    }
    picked = {case: apply_case_filter(candidates, target, case) for case in "ABCD"}
    assert picked == {"A": ["a"], "B": ["b"], "C": ["c"], "D": ["d"]}
    assert apply_case_filter(candidates, target, "none") == sorted(candidates)
    assert apply_case_filter({k: candidates[k] for k in "abce"}, target, "D") == []
    with pytest.raises(InputError):
        apply_case_filter(candidates, target, "E")


def test_heterogeneous_truncation(machines, space):
    repo = Repository()
    for wid, n in (("a", 3), ("b", 10), ("c", 2)):
        for seq, c in enumerate(list(space)[:n], start=1):
            repo.append(RunRecord(wid, c, FLAT, Measures(10.0 + seq, 1.0, 1.0), seq))
    out = truncate_heterogeneous(repo, 5)
    assert len(out.runs("a")) == 3
    assert out.runs("c") == repo.runs("c")
    kept = out.runs("b")
    assert 3 <= len(kept) <= 10 and kept == repo.runs("b")[: len(kept)]
    assert truncate_heterogeneous(repo, 5) == out
    assert len(repo.runs("b")) == 10
    sizes = {len(truncate_heterogeneous(repo, s).runs("b")) for s in range(40)}
    assert sizes == set(range(3, 11))


def test_cell_optimum_is_exhaustive(space):
    w = synthesize(SyntheticWorkloadSpec.random("o", 2), space)
    opt = cell_optimum(w, 0.5)
    table = w.table()
    feasible = [r for r in table if r.measures.runtime_s <= opt.runtime_target]
    assert opt.optimal_cost == min(r.measures.cost_usd for r in feasible)
    assert opt.optimal_energy == min(r.measures.energy_wh for r in feasible)
    assert opt.reference_point[0] == pytest.approx(1.1 * max(r.measures.cost_usd for r in feasible))


def test_plan_validation():
    with pytest.raises(InputError):
        ExperimentPlan("sideways")
    with pytest.raises(InputError):
        ExperimentPlan("boost", runtime_percentiles=(0.5, 0.3))
    with pytest.raises(InputError):
        ExperimentPlan("boost", runtime_percentiles=(0.0,))
    with pytest.raises(InputError):
        ExperimentPlan("cases", case_filter="Z")
    with pytest.raises(InputError):
        ExperimentPlan("boost", model_counts=())
    plan = ExperimentPlan.from_dict({"scenario": "moo", "modelCounts": [2], "repetitions": 1})
    assert plan.objectives == ("cost", "energy") and plan.methods == [BASELINE, "karasu-2"]


@pytest.fixture(scope="module")
def small_run(space):
    workloads = [synthesize(SyntheticWorkloadSpec.random("h", 11), space)]
    plan = ExperimentPlan("boost", runtime_percentiles=(0.3, 0.7), repetitions=2, model_counts=(1,), seed=4)
    return plan, workloads, run_experiment(plan, workloads)


def test_row_bookkeeping(small_run):
    plan, workloads, result = small_run
    sessions = {}
    for r in result.rows:
        sessions.setdefault((r.method, r.percentile, r.repetition), []).append(r)
    assert len(sessions) == 2 * 2 * 2
    for rows in sessions.values():
        assert [r.iteration for r in rows] == list(range(1, rows[0].stopped_at + 1))
        assert plan.min_runs <= rows[0].stopped_at <= plan.max_runs or rows[0].stop_reason == "spaceExhausted"
        costs = [r.cumulative_search_cost for r in rows]
        assert costs == sorted(costs)
        bests = [r.best_feasible_cost for r in rows if r.best_feasible_cost is not None]
        assert bests == sorted(bests, reverse=True)
    assert len(result.rows) == sum(rows[0].stopped_at for rows in sessions.values())


def test_within_flag_matches_brute_force(small_run):
    plan, workloads, result = small_run
    summary = result.summary
    for method in plan.methods:
        sessions = {}
        for r in result.rows:
            if r.method == method:
                sessions.setdefault((r.percentile, r.repetition), []).append(r)
        for i in (0, 4, plan.max_runs - 1):
            hits = 0
            for (pct, _), rows in sessions.items():
                opt = cell_optimum(workloads[0], pct).optimal_cost
                row = rows[min(i, len(rows) - 1)]
                hits += row.best_feasible_cost is not None and row.best_feasible_cost <= 1.25 * opt
            assert summary["methods"][method]["withinFraction"][i] == hits / len(sessions)


def test_experiment_is_deterministic_and_recomputable(small_run, tmp_path):
    plan, workloads, result = small_run
    again = run_experiment(plan, workloads)
    assert again.rows == result.rows
    results, summary = write_experiment(result, tmp_path)
    assert results.read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)
    rows = read_rows(results)
    assert rows == result.rows
    doc = json.loads(summary.read_text())
    recomputed = summarize(rows, doc["optima"], doc["plan"]["maxRuns"])
    assert recomputed["methods"] == doc["methods"]


def test_load_plan_variants(tmp_path):
    (tmp_path / "specs.json").write_text(json.dumps([{"workload_id": "q", "seed": 1, "random": True}]))
    (tmp_path / "p.json").write_text(json.dumps({"scenario": "boost", "specFile": "specs.json"}))
    plan, workloads = load_plan(tmp_path / "p.json")
    assert plan.repetitions == 10 and [w.workload_id for w in workloads] == ["q"]
    (tmp_path / "bad.json").write_text(json.dumps({"scenario": "boost"}))
    with pytest.raises(InputError):
        load_plan(tmp_path / "bad.json")
    with pytest.raises(InputError):
        load_plan(tmp_path / "missing.json")
