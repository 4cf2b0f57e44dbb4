"""Trace ingestion, cost/energy derivation and synthetic benchmark workloads.

Trace files are CSV with one row per execution::

    workload_id,framework,algorithm,dataset,machine_type,node_count,runtime_s,completed,
    cpu.%idle,memory.%memused,disk.%util,network.%ifutil,swap.%swpused,paging.%vmeff

Each metric column holds the run's samples (pooled over time and nodes)
separated by ``;``. Empty entries are missing samples and are dropped.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import InputError
from .repository import METRIC_NAMES, Measures, MetricVector, RunRecord, aggregate
from .space import MachineTable, ResourceConfiguration, SearchSpace, default_space

TRACE_COLUMNS = (
    "workload_id",
    "framework",
    "algorithm",
    "dataset",
    "machine_type",
    "node_count",
    "runtime_s",
    "completed",
) + METRIC_NAMES

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f"}


@dataclass
class TraceRow:
    workload_id: str
    framework: str
    algorithm: str
    dataset_tag: str
    machine_type: str
    node_count: int
    runtime_s: float
    completed: bool
    raw_metrics: list[np.ndarray]
    line: int = 0

    @property
    def metadata(self) -> dict:
        return {"framework": self.framework, "algorithm": self.algorithm, "dataset": self.dataset_tag}


def run_cost(price_per_hour_usd: float, node_count: int, runtime_s: float) -> float:
    """Per-second billing."""
    return price_per_hour_usd * node_count * runtime_s / 3600.0


def cpu_utilization(cpu_idle_samples) -> float:
    samples = np.asarray(cpu_idle_samples, dtype=float)
    samples = samples[~np.isnan(samples)]
    if samples.size == 0:
        raise ValueError("no cpu.%idle samples")
    return float(np.clip(1.0 - samples.mean() / 100.0, 0.0, 1.0))


def energy_from_utilization(
    utilization: float, power_idle_w: float, power_full_w: float, runtime_s: float, node_count: int
) -> float:
    power = power_idle_w + (power_full_w - power_idle_w) * utilization
    return power * runtime_s / 3600.0 * node_count


def derive_energy(row: TraceRow, machines: MachineTable) -> float:
    """Watt-hours under a linear CPU power profile between idle and full load."""
    idle, full = machines.power_bounds(row.machine_type)
    u = cpu_utilization(row.raw_metrics[0])
    return energy_from_utilization(u, idle, full, row.runtime_s, row.node_count)


def to_record(row: TraceRow, machines: MachineTable, sequence: int = 0) -> RunRecord:
    spec = machines[row.machine_type]
    config = ResourceConfiguration(row.machine_type, row.node_count, spec)
    return RunRecord(
        workload_id=row.workload_id,
        config=config,
        metrics=aggregate(row.raw_metrics),
        measures=Measures(
            runtime_s=row.runtime_s,
            cost_usd=run_cost(spec.price_per_hour_usd, row.node_count, row.runtime_s),
            energy_wh=derive_energy(row, machines),
        ),
        sequence=sequence,
    )


@dataclass
class IngestResult:
    rows: list[TraceRow]
    records: list[RunRecord]
    missing_samples: int = 0


def _parse_samples(cell: str) -> tuple[np.ndarray, int]:
    parts = [p.strip() for p in (cell or "").split(";")]
    values = [float(p) for p in parts if p]
    return np.array(values, dtype=float), sum(1 for p in parts if not p)


def read_trace(path: str | Path) -> tuple[list[TraceRow], int]:
    path = Path(path)
    try:
        handle = path.open(newline="")
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    rows, missing = [], 0
    with handle:
        reader = csv.DictReader(handle)
        absent = set(TRACE_COLUMNS) - set(reader.fieldnames or ())
        if absent:
            raise InputError(f"{path}: missing columns {sorted(absent)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                completed = rec["completed"].strip().lower()
                if completed not in _TRUE | _FALSE:
                    raise ValueError(f"completed must be a boolean, got {rec['completed']!r}")
                raw = []
                for name in METRIC_NAMES:
                    samples, gaps = _parse_samples(rec[name])
                    if samples.size == 0:
                        raise ValueError(f"no samples for {name}")
                    missing += gaps
                    raw.append(samples)
                row = TraceRow(
                    workload_id=rec["workload_id"].strip(),
                    framework=rec["framework"].strip(),
                    algorithm=rec["algorithm"].strip(),
                    dataset_tag=rec["dataset"].strip(),
                    machine_type=rec["machine_type"].strip(),
                    node_count=int(rec["node_count"]),
                    runtime_s=float(rec["runtime_s"]),
                    completed=completed in _TRUE,
                    raw_metrics=raw,
                    line=lineno,
                )
                if row.runtime_s <= 0 or row.node_count < 1:
                    raise ValueError("runtime_s and node_count must be positive")
            except (TypeError, ValueError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            rows.append(row)
    return rows, missing


def write_trace(rows: list[TraceRow], handle) -> None:
    """Write rows in the schema ``read_trace`` accepts."""
    writer = csv.writer(handle, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for r in rows:
        writer.writerow(
            [r.workload_id, r.framework, r.algorithm, r.dataset_tag, r.machine_type, r.node_count,
             repr(float(r.runtime_s)), "true" if r.completed else "false"]
            + [";".join(repr(float(v)) for v in samples) for samples in r.raw_metrics]
        )


def ingest(path: str | Path, machines: MachineTable) -> IngestResult:
    """Parse a trace file and derive one shareable record per row."""
    rows, missing = read_trace(path)
    records, seq = [], {}
    for row in rows:
        if row.machine_type not in machines:
            raise InputError(f"{path}:{row.line}: unknown machine type {row.machine_type!r}")
        seq[row.workload_id] = seq.get(row.workload_id, 0) + 1
        records.append(to_record(row, machines, sequence=seq[row.workload_id]))
    return IngestResult(rows, records, missing)


class Workload:
    """A black box over a search space plus harness-only metadata.

    ``run`` returns a record with sequence 0; the session assigns sequences.
    """

    def __init__(self, workload_id: str, space: SearchSpace, metadata: dict | None = None):
        self.workload_id = workload_id
        self.space = space
        self.metadata = dict(metadata or {})

    def run(self, config: ResourceConfiguration) -> RunRecord:
        raise NotImplementedError

    def completed(self, config: ResourceConfiguration) -> bool:
        return True

    def table(self) -> list[RunRecord]:
        return [self.run(c) for c in self.space]

    def __call__(self, config: ResourceConfiguration) -> RunRecord:
        return self.run(config)


class ReplayWorkload(Workload):
    """Replays recorded executions; the space is the set of recorded configurations."""

    def __init__(self, workload_id: str, rows: list[TraceRow], records: list[RunRecord]):
        space = SearchSpace(r.config for r in records)
        super().__init__(workload_id, space, rows[0].metadata if rows else {})
        self._records = {r.config.key: r for r in records}
        self._completed = {(row.machine_type, row.node_count): row.completed for row in rows}

    def run(self, config):
        self.space.ordinal(config)
        return replace(self._records[config.key], sequence=0)

    def completed(self, config):
        return self._completed[config.key]


def replay_workloads(result: IngestResult) -> list[Workload]:
    grouped: dict[str, tuple[list, list]] = {}
    for row, rec in zip(result.rows, result.records):
        rows, recs = grouped.setdefault(row.workload_id, ([], []))
        rows.append(row)
        recs.append(rec)
    return [ReplayWorkload(wid, *grouped[wid]) for wid in sorted(grouped)]


# Base utilization profiles, p10/p50/p90 per metric in canonical order.
ARCHETYPES = {
    "cpu": ((5, 15, 30), (35, 42, 50), (2, 5, 10), (3, 8, 15), (0, 1, 2), (88, 95, 99)),
    "memory": ((50, 65, 80), (75, 88, 97), (5, 12, 25), (2, 5, 10), (30, 50, 70), (10, 25, 45)),
    "io": ((55, 70, 85), (15, 22, 30), (70, 85, 97), (5, 10, 18), (0, 2, 5), (40, 55, 70)),
    "network": ((60, 75, 88), (10, 18, 25), (5, 10, 18), (70, 85, 96), (0, 1, 3), (50, 65, 80)),
}


def archetype_profile(name: str) -> np.ndarray:
    """``mirror:<base>`` is the exact reflection ``100 - base`` (Pearson -1)."""
    if name.startswith("mirror:"):
        return 100.0 - archetype_profile(name.split(":", 1)[1])
    try:
        return np.array(ARCHETYPES[name], dtype=float)
    except KeyError:
        raise InputError(f"unknown metric archetype {name!r}") from None


@dataclass
class SyntheticWorkloadSpec:
    """A smooth runtime surface over (nodes, vcpus, memory) with log-normal noise.

    runtime = (work * (serial + (1 - serial) / (vcpus * speed)) * (1 + spill)
               + node_overhead * nodes) * exp(noise * N(0, 1))
    where ``spill = spill_penalty * max(0, mem_need_gb / total_mem - 1)``.
    """

    workload_id: str
    seed: int = 0
    work: float = 20000.0
    serial_fraction: float = 0.05
    node_overhead: float = 4.0
    mem_need_gb: float = 120.0
    spill_penalty: float = 1.5
    family_speed: dict = field(default_factory=lambda: {"c4": 1.15, "m4": 1.0, "r4": 0.95})
    noise: float = 0.05
    archetype: str = "cpu"
    samples_per_run: int = 60
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.work <= 0 or self.node_overhead < 0 or not 0 <= self.serial_fraction < 1:
            raise InputError(f"invalid landscape parameters for {self.workload_id!r}")
        archetype_profile(self.archetype)

    @classmethod
    def random(cls, workload_id: str, seed: int, archetype: str = "cpu", **overrides) -> "SyntheticWorkloadSpec":
        rng = np.random.default_rng([seed, 7])
        params = dict(
            work=float(rng.uniform(1.0e4, 4.0e4)),
            serial_fraction=float(rng.uniform(0.001, 0.01)),
            node_overhead=float(rng.uniform(0.2, 1.0)),
            mem_need_gb=float(rng.uniform(40.0, 150.0)),
            spill_penalty=float(rng.uniform(0.3, 1.0)),
            family_speed={f: float(rng.uniform(0.8, 1.25)) for f in ("c4", "m4", "r4")},
        )
        params.update(overrides)
        return cls(workload_id=workload_id, seed=seed, archetype=archetype, **params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticWorkloadSpec":
        try:
            return cls(**d)
        except TypeError as exc:
            raise InputError(f"bad synthetic workload spec: {exc}") from exc


def _config_rng(seed: int, config: ResourceConfiguration) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(f"{config.machine_type}:{config.node_count}".encode())])


def _quantile_samples(profile_row, count, rng) -> np.ndarray:
    p10, p50, p90 = profile_row
    lo, hi = max(0.0, p10 - (p50 - p10) * 0.25), min(100.0, p90 + (p90 - p50) * 0.25)
    u = rng.uniform(0.0, 1.0, count)
    return np.interp(u, (0.0, 0.1, 0.5, 0.9, 1.0), (lo, p10, p50, p90, hi))


class SyntheticWorkload(Workload):
    def __init__(self, spec: SyntheticWorkloadSpec, space: SearchSpace, machines: MachineTable | None = None):
        super().__init__(spec.workload_id, space, spec.metadata)
        self.spec = spec
        self.machines = machines or MachineTable.default()

    def runtime(self, config: ResourceConfiguration, rng=None) -> float:
        s = self.spec
        family = config.machine_type.split(".")[0]
        speed = s.family_speed.get(family, 1.0)
        compute = s.work * (s.serial_fraction + (1 - s.serial_fraction) / (config.total_vcpus * speed))
        spill = s.spill_penalty * max(0.0, s.mem_need_gb / config.total_mem_gb - 1.0)
        base = compute * (1.0 + spill) + s.node_overhead * config.node_count
        factor = np.exp(s.noise * rng.standard_normal()) if rng is not None else 1.0
        return float(base * factor)

    def trace_row(self, config: ResourceConfiguration) -> TraceRow:
        self.space.ordinal(config)
        s = self.spec
        rng = _config_rng(s.seed, config)
        runtime = self.runtime(config, rng)
        profile = archetype_profile(s.archetype).copy()
        # parallel share of the compute phase shifts CPU busy time
        parallel = (1 - s.serial_fraction) / (config.total_vcpus * s.serial_fraction + 1 - s.serial_fraction)
        profile[0] = 100.0 - (100.0 - profile[0]) * (0.75 + 0.25 * parallel)
        profile = np.clip(profile + rng.normal(0.0, 1.0, profile.shape), 0.0, 100.0)
        profile.sort(axis=1)
        raw = [_quantile_samples(row, s.samples_per_run, rng) for row in profile]
        return TraceRow(
            workload_id=s.workload_id,
            framework=s.metadata.get("framework", ""),
            algorithm=s.metadata.get("algorithm", ""),
            dataset_tag=s.metadata.get("dataset", ""),
            machine_type=config.machine_type,
            node_count=config.node_count,
            runtime_s=runtime,
            completed=True,
            raw_metrics=raw,
        )

    def run(self, config: ResourceConfiguration) -> RunRecord:
        return to_record(self.trace_row(config), self.machines)


def synthesize(spec: SyntheticWorkloadSpec, space: SearchSpace | None = None,
               machines: MachineTable | None = None) -> SyntheticWorkload:
    """Deterministic black box: the same spec and configuration give the same record."""
    machines = machines or MachineTable.default()
    return SyntheticWorkload(spec, space or default_space(machines), machines)


def load_synthetic_specs(path: str | Path) -> list[SyntheticWorkloadSpec]:
    """Read a JSON document: a list of specs or ``{"workloads": [...]}``.

    Entries with ``"random": true`` draw landscape parameters from their seed.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc.msg})") from exc
    return parse_synthetic_specs(doc, source=str(path))


def parse_synthetic_specs(doc, source: str = "<specs>") -> list[SyntheticWorkloadSpec]:
    entries = doc.get("workloads") if isinstance(doc, dict) else doc
    if not isinstance(entries, list):
        raise InputError(f"{source}: expected a list of workload specs")
    specs = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "workload_id" not in entry:
            raise InputError(f"{source}: workload {i} lacks 'workload_id'")
        entry = dict(entry)
        if entry.pop("random", False):
            wid = entry.pop("workload_id")
            seed = int(entry.pop("seed", 0))
            archetype = entry.pop("archetype", "cpu")
            try:
                specs.append(SyntheticWorkloadSpec.random(wid, seed, archetype, **entry))
            except TypeError as exc:
                raise InputError(f"{source}: workload {i}: {exc}") from exc
        else:
            specs.append(SyntheticWorkloadSpec.from_dict(entry))
    return specs


BlackBox = Callable[[ResourceConfiguration], RunRecord]
