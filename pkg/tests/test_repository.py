import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import pearsonr

from cotune.errors import InputError, RepositoryFormatError
from cotune.repository import (
    METRIC_NAMES,
    Measures,
    MetricVector,
    Repository,
    RunRecord,
    aggregate,
    load,
    pair_similarity,
    select_support,
    store,
    workload_similarity,
)
from cotune.space import MachineTable, ResourceConfiguration


def make_run(machines, wid, mt, nodes, flat, seq):
    rows = np.sort(np.asarray(flat, dtype=float).reshape(6, 3), axis=1)
    return RunRecord(
        wid,
        ResourceConfiguration(mt, nodes, machines[mt]),
        MetricVector(tuple(map(tuple, rows))),
        Measures(100.0 + seq, 1.0 + seq, 10.0 + seq),
        seq,
    )


def naive_similarity(target_runs, cand_runs):
    scales, scores = [], []
    for a in target_runs:
        for b in cand_runs:
            if a.config.machine_type != b.config.machine_type:
                continue
            scales.append(1.0 / 2 ** abs(math.log2(a.config.node_count) - math.log2(b.config.node_count)))
            va, vb = a.metrics.flatten(), b.metrics.flatten()
            if np.std(va) == 0 or np.std(vb) == 0:
                scores.append(0.5)
            else:
                scores.append((pearsonr(va, vb)[0] + 1) / 2)
    if not scales:
        return 0.5
    return sum(s * c for s, c in zip(scales, scores)) / sum(scales)


def naive_select(target, repo, k):
    results = []
    for wid in repo.workloads():
        if wid == target or len(repo.runs(wid)) < 2:
            continue
        results.append((naive_similarity(repo.runs(target), repo.runs(wid)), wid))
    results.sort(key=lambda r: (-r[0], r[1]))
    return results[:k]


def random_store(machines, rng, n_workloads=10):
    repo = Repository()
    types = ["m4.large", "c4.xlarge", "r4.2xlarge"]
    base = rng.uniform(0, 100, size=18)
    for w in range(n_workloads):
        flat = base + rng.normal(0, 5 + 10 * w, size=18)
        for seq in range(1, int(rng.integers(1, 5)) + 1):
            noisy = np.clip(flat + rng.normal(0, 2, size=18), 0, 100)
            repo.append(make_run(machines, f"w{w}", types[int(rng.integers(3))],
                                 int(rng.choice([4, 6, 8, 16])), noisy, seq))
    return repo


def test_aggregate_examples():
    raw = [np.full(7, 0.5)] + [np.arange(1.0, 101.0)] * 5
    mv = aggregate(raw)
    assert mv.values[0] == (0.5, 0.5, 0.5)
    assert mv.values[1] == pytest.approx((10.9, 50.5, 90.1))
    with pytest.raises(ValueError):
        aggregate([np.array([])] + [np.ones(3)] * 5)
    with pytest.raises(ValueError):
        aggregate([np.ones(3)] * 5)


@given(st.integers(0, 2**31))
def test_aggregate_sort_oracle_and_permutation(seed):
    rng = np.random.default_rng(seed)
    raw = [rng.uniform(0, 100, size=int(rng.integers(1, 40))) for _ in range(6)]
    mv = aggregate(raw)
    for row, vals in zip(raw, mv.values):
        s = np.sort(row)
        for q, v in zip((0.1, 0.5, 0.9), vals):
            h = (len(s) - 1) * q
            lo = int(np.floor(h))
            expect = s[lo] + (h - lo) * (s[min(lo + 1, len(s) - 1)] - s[lo])
            assert v == pytest.approx(expect, rel=1e-12, abs=1e-12)
        assert vals[0] <= vals[1] <= vals[2]
    assert aggregate([rng.permutation(r) for r in raw]) == mv


def test_aggregate_drops_nan():
    raw = [np.array([1.0, np.nan, 3.0])] + [np.ones(2)] * 5
    assert aggregate(raw).values[0] == pytest.approx((1.2, 2.0, 2.8))


def test_pair_similarity_fixtures(machines):
    flat = np.arange(18.0)
    a = make_run(machines, "a", "m4.large", 4, flat, 1)
    b = make_run(machines, "b", "m4.large", 16, flat, 1)
    assert pair_similarity(a, b) == (0.25, 1.0)
    assert pair_similarity(a, a) == (1.0, 1.0)
    anti = RunRecord("c", a.config, MetricVector(tuple(tuple(100 - v for v in r) for r in a.metrics.values)),
                     a.measures, 1)
    assert pair_similarity(a, anti)[1] == pytest.approx(0.0, abs=1e-12)
    flat_mv = make_run(machines, "d", "m4.large", 4, np.full(18, 3.0), 1)
    assert pair_similarity(a, flat_mv)[1] == 0.5


def test_weighted_average_example(machines):
    repo = Repository()
    flat = np.arange(18.0)
    repo.append(make_run(machines, "t", "m4.large", 4, flat, 1))
    repo.append(make_run(machines, "c", "m4.large", 4, flat, 1))
    repo.append(make_run(machines, "c", "m4.large", 16, np.full(18, 1.0), 2))
    # pairs: (scale 1, score 1) and (scale 0.25, score 0.5)
    assert workload_similarity("t", "c", repo) == pytest.approx((1.0 + 0.125) / 1.25)
    repo.append(make_run(machines, "x", "c4.large", 4, flat, 1))
    assert workload_similarity("t", "x", repo) == 0.5
    with pytest.raises(ValueError):
        workload_similarity("t", "t", repo)
    with pytest.raises(KeyError):
        workload_similarity("t", "missing", repo)


def test_selection_matches_naive_reference(machines):
    rng = np.random.default_rng(7)
    for _ in range(100):
        repo = random_store(machines, rng)
        k = int(rng.integers(0, 5))
        got = [(r.score, r.workload_id) for r in select_support("w0", repo, k)]
        want = naive_select("w0", repo, k)
        assert [w for _, w in got] == [w for _, w in want]
        np.testing.assert_allclose([s for s, _ in got], [s for s, _ in want], rtol=1e-12, atol=1e-12)


def test_selection_edge_cases(machines):
    assert select_support("t", Repository(), 3) == []
    repo = random_store(machines, np.random.default_rng(1))
    assert select_support("w0", repo, 0) == []
    assert select_support("nobody", repo, 3) == []
    for r in select_support("w0", repo, 20):
        assert 0.0 <= r.score <= 1.0
        assert len(repo.runs(r.workload_id)) >= 2


@given(st.integers(0, 2**31))
def test_similarity_symmetric_and_unrelated_type_neutral(seed):
    machines = MachineTable.default()
    rng = np.random.default_rng(seed)
    repo = random_store(machines, rng, 3)
    ab = workload_similarity("w0", "w1", repo)
    assert ab == pytest.approx(workload_similarity("w1", "w0", repo), rel=1e-12)
    used = {r.config.machine_type for r in repo.runs("w0")}
    unused = next(t for t in ["m4.large", "c4.xlarge", "r4.2xlarge", "c4.large"] if t not in used)
    before = workload_similarity("w0", "w1", repo)
    matched = any(r.config.machine_type in used for r in repo.runs("w1"))
    repo.append(make_run(machines, "w1", unused, 8, rng.uniform(0, 100, 18), 99))
    if matched:
        assert workload_similarity("w0", "w1", repo) == pytest.approx(before, rel=1e-12)


def test_round_trip_and_append_only(tmp_path, machines):
    repo = random_store(machines, np.random.default_rng(3), 3)
    store(repo, tmp_path / "r")
    loaded = load(tmp_path / "r")
    assert loaded == repo
    assert load(tmp_path / "r") == loaded
    empty = tmp_path / "e"
    store(Repository(), empty)
    assert load(empty) == Repository()
    first = loaded.runs("w0")[0]
    with pytest.raises(InputError):
        loaded.append(first)
    with pytest.raises(InputError):
        store(repo, tmp_path / "r")
    nxt = RunRecord("w0", first.config, first.metrics, first.measures, 50)
    loaded.append(nxt)
    assert (tmp_path / "r" / "w0" / "50.json").exists()
    assert load(tmp_path / "r").runs("w0")[-1] == nxt


def test_unsafe_workload_id_rejected(machines):
    with pytest.raises(InputError):
        Repository().append(make_run(machines, "../evil", "m4.large", 4, np.arange(18.0), 1))


def test_layout_and_data_minimalism(tmp_path, machines):
    repo = Repository(tmp_path)
    repo.append(make_run(machines, "z9", "m4.large", 4, np.arange(18.0), 1))
    doc = json.loads((tmp_path / "z9" / "1.json").read_text())
    assert set(doc) == {"workloadId", "config", "metrics", "measures", "sequence"}
    assert set(doc["config"]) == {"machineType", "nodeCount", "perNode"}
    assert set(doc["metrics"]) == set(METRIC_NAMES)
    assert set(doc["measures"]) == {"runtimeS", "costUsd", "energyWh"}
    text = json.dumps(doc)
    for word in ("framework", "algorithm", "dataset"):
        assert word not in text


def test_malformed_documents_name_file_and_field(tmp_path, machines):
    repo = Repository(tmp_path)
    repo.append(make_run(machines, "w", "m4.large", 4, np.arange(18.0), 1))
    path = tmp_path / "w" / "1.json"
    doc = json.loads(path.read_text())
    del doc["measures"]["costUsd"]
    path.write_text(json.dumps(doc))
    with pytest.raises(RepositoryFormatError, match=r"1\.json.*measures\.costUsd"):
        load(tmp_path)
    path.write_text("{not json")
    with pytest.raises(RepositoryFormatError, match=r"1\.json"):
        load(tmp_path)
    with pytest.raises(InputError):
        load(tmp_path / "absent")


def test_bulk_load_is_fast(tmp_path, machines):
    rng = np.random.default_rng(0)
    repo = Repository()
    for w in range(18):
        for seq in range(1, 70):
            repo.append(make_run(machines, f"w{w}", "m4.large", 4 + seq, rng.uniform(0, 100, 18), seq))
    assert len(repo) == 1242
    store(repo, tmp_path)
    start = time.perf_counter()
    loaded = load(tmp_path)
    elapsed = time.perf_counter() - start
    assert loaded == repo
    assert elapsed < 1.0


def test_measures_and_vector_validation():
    with pytest.raises(ValueError):
        Measures(0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        MetricVector(((1, 2, 3),) * 5)
