"""Shared store of data-minimal run tuples and similarity-based support selection.

A stored run holds only an opaque workload id, the resource configuration,
aggregated utilization quantiles and the resulting performance measures.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import InputError, RepositoryFormatError
from .space import ResourceConfiguration

METRIC_NAMES = (
    "cpu.%idle",
    "memory.%memused",
    "disk.%util",
    "network.%ifutil",
    "swap.%swpused",
    "paging.%vmeff",
)
QUANTILES = (10, 50, 90)
QUANTILE_KEYS = ("p10", "p50", "p90")
DEFAULT_SIMILARITY = 0.5
DEFAULT_SUPPORT_COUNT = 3
MIN_SUPPORT_RUNS = 2

_SAFE_ID = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass(frozen=True)
class MetricVector:
    """p10/p50/p90 per metric, metrics in canonical order, all in percent."""

    values: tuple[tuple[float, float, float], ...]

    def __post_init__(self):
        vals = tuple(tuple(float(v) for v in row) for row in self.values)
        if len(vals) != len(METRIC_NAMES) or any(len(r) != 3 for r in vals):
            raise ValueError("metric vector needs 3 quantiles for each of the 6 metrics")
        object.__setattr__(self, "values", vals)

    def flatten(self) -> np.ndarray:
        return np.array(self.values, dtype=float).ravel()

    def __getitem__(self, metric: str) -> tuple[float, float, float]:
        return self.values[METRIC_NAMES.index(metric)]

    def to_dict(self) -> dict:
        return {
            name: dict(zip(QUANTILE_KEYS, row)) for name, row in zip(METRIC_NAMES, self.values)
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricVector":
        return cls(tuple(tuple(d[name][q] for q in QUANTILE_KEYS) for name in METRIC_NAMES))


@dataclass(frozen=True)
class Measures:
    runtime_s: float
    cost_usd: float
    energy_wh: float

    def __post_init__(self):
        if min(self.runtime_s, self.cost_usd, self.energy_wh) <= 0:
            raise ValueError(f"measures must be > 0: {self}")

    def get(self, kind: str) -> float:
        return {"runtime": self.runtime_s, "cost": self.cost_usd, "energy": self.energy_wh}[kind]

    def to_dict(self) -> dict:
        return {"runtimeS": self.runtime_s, "costUsd": self.cost_usd, "energyWh": self.energy_wh}

    @classmethod
    def from_dict(cls, d: dict) -> "Measures":
        return cls(float(d["runtimeS"]), float(d["costUsd"]), float(d["energyWh"]))


@dataclass(frozen=True)
class RunRecord:
    workload_id: str
    config: ResourceConfiguration
    metrics: MetricVector
    measures: Measures
    sequence: int = 0

    def to_dict(self) -> dict:
        return {
            "workloadId": self.workload_id,
            "config": self.config.to_dict(),
            "metrics": self.metrics.to_dict(),
            "measures": self.measures.to_dict(),
            "sequence": self.sequence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            workload_id=str(d["workloadId"]),
            config=ResourceConfiguration.from_dict(d["config"]),
            metrics=MetricVector.from_dict(d["metrics"]),
            measures=Measures.from_dict(d["measures"]),
            sequence=int(d["sequence"]),
        )


@dataclass(frozen=True)
class SimilarityResult:
    workload_id: str
    score: float


def aggregate(raw) -> MetricVector:
    """Reduce a (6 metrics x t samples) matrix to 10/50/90th percentiles.

    NaN samples are dropped; a metric left with no samples is an error.
    """
    rows = [np.asarray(r, dtype=float) for r in raw]
    if len(rows) != len(METRIC_NAMES):
        raise ValueError(f"expected {len(METRIC_NAMES)} metric rows, got {len(rows)}")
    out = []
    for name, row in zip(METRIC_NAMES, rows):
        row = row[~np.isnan(row)]
        if row.size == 0:
            raise ValueError(f"no samples for metric {name}")
        out.append(tuple(np.percentile(row, QUANTILES)))
    return MetricVector(tuple(out))


def _pearson_score(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt(np.dot(a, a) * np.dot(b, b))
    if denom == 0:
        return DEFAULT_SIMILARITY
    return float(np.clip((np.dot(a, b) / denom + 1.0) / 2.0, 0.0, 1.0))


def pair_similarity(run_a: RunRecord, run_b: RunRecord) -> tuple[float, float]:
    """(scale, score) for two runs on the same machine type."""
    weight = abs(np.log2(run_a.config.node_count) - np.log2(run_b.config.node_count))
    scale = 1.0 / 2.0**weight
    return scale, _pearson_score(run_a.metrics.flatten(), run_b.metrics.flatten())


def _centered_unit(runs: list[RunRecord]) -> np.ndarray:
    M = np.array([r.metrics.flatten() for r in runs])
    M = M - M.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(M, axis=1, keepdims=True)
    return np.divide(M, norms, out=np.zeros_like(M), where=norms > 0)


def _weighted_score(target_runs: list[RunRecord], candidate_runs: list[RunRecord]) -> float:
    t_types = np.array([r.config.machine_type for r in target_runs])
    c_types = np.array([r.config.machine_type for r in candidate_runs])
    same = t_types[:, None] == c_types[None, :]
    if not same.any():
        return DEFAULT_SIMILARITY
    t_log = np.log2([r.config.node_count for r in target_runs])
    c_log = np.log2([r.config.node_count for r in candidate_runs])
    scale = 1.0 / 2.0 ** np.abs(t_log[:, None] - c_log[None, :])
    U, V = _centered_unit(target_runs), _centered_unit(candidate_runs)
    r = U @ V.T
    degenerate = (np.linalg.norm(U, axis=1)[:, None] == 0) | (np.linalg.norm(V, axis=1)[None, :] == 0)
    score = np.where(degenerate, DEFAULT_SIMILARITY, np.clip((r + 1.0) / 2.0, 0.0, 1.0))
    scale = np.where(same, scale, 0.0)
    return float(np.sum(scale * score) / np.sum(scale))


class Repository:
    """Run tuples grouped by workload id, optionally persisted under ``root``.

    Layout: ``<root>/<workloadId>/<sequence>.json``. Writes are append-only.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        self._runs: dict[str, list[RunRecord]] = {}

    def __contains__(self, workload_id: str) -> bool:
        return workload_id in self._runs

    def __len__(self) -> int:
        return sum(len(v) for v in self._runs.values())

    def __eq__(self, other) -> bool:
        return isinstance(other, Repository) and self._runs == other._runs

    def workloads(self) -> list[str]:
        return sorted(self._runs)

    def runs(self, workload_id: str) -> list[RunRecord]:
        try:
            return list(self._runs[workload_id])
        except KeyError:
            raise KeyError(f"unknown workload {workload_id!r}") from None

    def records(self) -> Iterator[RunRecord]:
        for wid in self.workloads():
            yield from self._runs[wid]

    def append(self, record: RunRecord) -> None:
        if not _SAFE_ID.match(record.workload_id):
            raise InputError(f"workload id {record.workload_id!r} is not path-safe")
        runs = self._runs.setdefault(record.workload_id, [])
        if any(r.sequence == record.sequence for r in runs):
            raise InputError(
                f"run {record.sequence} of {record.workload_id!r} already stored (append-only)"
            )
        if self.root is not None:
            _write_record(self.root, record)
        runs.append(record)
        runs.sort(key=lambda r: r.sequence)

    def extend(self, records: Iterable[RunRecord]) -> None:
        for r in records:
            self.append(r)

    def view(self, workload_ids: Iterable[str] | None = None) -> "Repository":
        """In-memory copy restricted to ``workload_ids``; writes to it stay local."""
        out = Repository()
        ids = self._runs if workload_ids is None else workload_ids
        for wid in ids:
            if wid in self._runs:
                out._runs[wid] = list(self._runs[wid])
        return out

    def truncated(self, keep: dict[str, int]) -> "Repository":
        out = self.view()
        for wid, k in keep.items():
            out._runs[wid] = out._runs[wid][:k]
        return out


def _write_record(root: Path, record: RunRecord) -> None:
    directory = root / record.workload_id
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"{record.sequence}.json"
    if path.exists():
        raise InputError(f"{path} already exists (append-only)")
    path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n")


def store(repo: Repository, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for record in repo.records():
        _write_record(root, record)


def _missing_field(d, prefix="") -> str | None:
    required = {
        "workloadId": None,
        "config": {"machineType": None, "nodeCount": None, "perNode": None},
        "metrics": {name: None for name in METRIC_NAMES},
        "measures": {"runtimeS": None, "costUsd": None, "energyWh": None},
        "sequence": None,
    }

    def walk(node, spec, path):
        if not isinstance(node, dict):
            return path or "<root>"
        for key, sub in spec.items():
            if key not in node:
                return f"{path}{key}"
            if sub is not None:
                found = walk(node[key], sub, f"{path}{key}.")
                if found:
                    return found
        return None

    return walk(d, required, prefix)


def load(path: str | Path) -> Repository:
    """Read a repository directory; the result appends back into ``path``."""
    root = Path(path)
    repo = Repository()
    if not root.exists():
        raise InputError(f"repository {root} does not exist")
    for directory in sorted(p for p in root.iterdir() if p.is_dir()):
        for file in sorted(directory.glob("*.json"), key=lambda p: (len(p.stem), p.stem)):
            try:
                doc = json.loads(file.read_text())
            except json.JSONDecodeError as exc:
                raise RepositoryFormatError(f"{file}: invalid JSON ({exc.msg})") from exc
            missing = _missing_field(doc)
            if missing:
                raise RepositoryFormatError(f"{file}: missing field {missing!r}")
            try:
                record = RunRecord.from_dict(doc)
            except (KeyError, TypeError, ValueError) as exc:
                raise RepositoryFormatError(f"{file}: bad field value ({exc})") from exc
            repo._runs.setdefault(record.workload_id, []).append(record)
    for runs in repo._runs.values():
        runs.sort(key=lambda r: r.sequence)
    repo.root = root
    return repo


def workload_similarity(target: str, candidate: str, repo: Repository) -> float:
    """Scale-weighted average of pair scores over machine-type-matching runs."""
    if target == candidate:
        raise ValueError("candidate must differ from target")
    return _weighted_score(repo.runs(target), repo.runs(candidate))


def select_support(
    target: str,
    repo: Repository,
    k: int = DEFAULT_SUPPORT_COUNT,
    target_runs: list[RunRecord] | None = None,
) -> list[SimilarityResult]:
    """Top-``k`` candidates by similarity, ties broken by workload id.

    ``target_runs`` overrides the target's stored runs (e.g. a live session).
    """
    if k <= 0:
        return []
    if target_runs is None:
        target_runs = repo.runs(target) if target in repo else []
    if not target_runs:
        return []
    results = []
    for wid in repo.workloads():
        if wid == target:
            continue
        runs = repo.runs(wid)
        if len(runs) < MIN_SUPPORT_RUNS:
            continue
        results.append(SimilarityResult(wid, _weighted_score(target_runs, runs)))
    results.sort(key=lambda r: (-r.score, r.workload_id))
    return results[:k]
