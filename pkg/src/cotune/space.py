"""Resource configurations, machine specification tables and search spaces."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator

from .errors import InputError, MembershipError

SIZE_POWER_FACTORS = {"large": 1.0, "xlarge": 2.0, "2xlarge": 4.0}

MACHINE_TABLE_COLUMNS = (
    "machine_type",
    "vcpus",
    "mem_gb",
    "price_per_hour_usd",
    "power_idle_w",
    "power_full_w",
)


@dataclass(frozen=True)
class MachineSpec:
    vcpus: int
    mem_gb: float
    price_per_hour_usd: float
    power_idle_w: float
    power_full_w: float

    def to_dict(self) -> dict:
        return {
            "vcpus": self.vcpus,
            "memGb": self.mem_gb,
            "pricePerHourUsd": self.price_per_hour_usd,
            "powerIdleW": self.power_idle_w,
            "powerFullW": self.power_full_w,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MachineSpec":
        return cls(
            vcpus=int(d["vcpus"]),
            mem_gb=float(d["memGb"]),
            price_per_hour_usd=float(d["pricePerHourUsd"]),
            power_idle_w=float(d["powerIdleW"]),
            power_full_w=float(d["powerFullW"]),
        )


@dataclass(frozen=True)
class ResourceConfiguration:
    """A homogeneous cluster: ``node_count`` machines of ``machine_type``."""

    machine_type: str
    node_count: int
    per_node: MachineSpec

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError(f"node_count must be >= 1, got {self.node_count}")
        p = self.per_node
        if min(p.price_per_hour_usd, p.power_idle_w, p.power_full_w) <= 0:
            raise ValueError(f"price and power values must be > 0 for {self.machine_type}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.machine_type, self.node_count)

    @property
    def total_vcpus(self) -> int:
        return self.per_node.vcpus * self.node_count

    @property
    def total_mem_gb(self) -> float:
        return self.per_node.mem_gb * self.node_count

    def to_dict(self) -> dict:
        return {
            "machineType": self.machine_type,
            "nodeCount": self.node_count,
            "perNode": self.per_node.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResourceConfiguration":
        return cls(
            machine_type=str(d["machineType"]),
            node_count=int(d["nodeCount"]),
            per_node=MachineSpec.from_dict(d["perNode"]),
        )

    def __str__(self) -> str:
        return f"{self.node_count}x{self.machine_type}"


class MachineTable:
    """Per-machine-type specifications (cores, memory, price, power bounds).

    Power bounds missing for ``xlarge``/``2xlarge`` sizes are derived from the
    ``large`` size of the same family at 2x and 4x respectively.
    """

    def __init__(self, specs: dict[str, MachineSpec]):
        self.specs = dict(specs)

    def __contains__(self, machine_type: str) -> bool:
        return machine_type in self.specs

    def __getitem__(self, machine_type: str) -> MachineSpec:
        try:
            return self.specs[machine_type]
        except KeyError:
            raise InputError(f"unknown machine type {machine_type!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self.specs)

    def power_bounds(self, machine_type: str) -> tuple[float, float]:
        family, _, size = machine_type.partition(".")
        large = f"{family}.large"
        if size in SIZE_POWER_FACTORS and large in self.specs:
            base = self.specs[large]
            factor = SIZE_POWER_FACTORS[size]
            return base.power_idle_w * factor, base.power_full_w * factor
        spec = self.specs.get(machine_type)
        if spec is None:
            raise InputError(f"no power entry for machine type {machine_type!r}")
        return spec.power_idle_w, spec.power_full_w

    @classmethod
    def from_csv(cls, path: str | Path) -> "MachineTable":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"{path}: {exc.strerror}") from exc
        return cls.parse(text, source=str(path))

    @classmethod
    def parse(cls, text: str, source: str = "<machines>") -> "MachineTable":
        reader = csv.DictReader(io.StringIO(text))
        missing = set(MACHINE_TABLE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise InputError(f"{source}: missing columns {sorted(missing)}")
        specs = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                specs[row["machine_type"]] = MachineSpec(
                    vcpus=int(row["vcpus"]),
                    mem_gb=float(row["mem_gb"]),
                    price_per_hour_usd=float(row["price_per_hour_usd"]),
                    power_idle_w=float(row["power_idle_w"]),
                    power_full_w=float(row["power_full_w"]),
                )
            except (TypeError, ValueError) as exc:
                raise InputError(f"{source}:{lineno}: {exc}") from exc
        return cls(specs)

    @classmethod
    def default(cls) -> "MachineTable":
        text = resources.files("cotune").joinpath("data/machines.csv").read_text()
        return cls.parse(text, source="machines.csv")


class SearchSpace:
    """A finite, ordered list of configurations with encoder ranges."""

    def __init__(self, configurations: Iterable[ResourceConfiguration]):
        self.configurations = tuple(configurations)
        if not self.configurations:
            raise ValueError("search space must not be empty")
        self._index = {}
        for i, c in enumerate(self.configurations):
            if c.key in self._index:
                raise ValueError(f"duplicate configuration {c}")
            self._index[c.key] = i
        raw = [_raw_features(c) for c in self.configurations]
        self.lower = tuple(min(col) for col in zip(*raw))
        self.upper = tuple(max(col) for col in zip(*raw))

    dimension = 5

    def __len__(self) -> int:
        return len(self.configurations)

    def __iter__(self) -> Iterator[ResourceConfiguration]:
        return iter(self.configurations)

    def __contains__(self, config: ResourceConfiguration) -> bool:
        return config.key in self._index

    def ordinal(self, config: ResourceConfiguration) -> int:
        try:
            return self._index[config.key]
        except KeyError:
            raise MembershipError(f"{config} is not in the search space") from None

    def get(self, machine_type: str, node_count: int) -> ResourceConfiguration:
        try:
            return self.configurations[self._index[(machine_type, node_count)]]
        except KeyError:
            raise MembershipError(f"{node_count}x{machine_type} is not in the search space") from None

    @classmethod
    def from_grid(cls, machines: MachineTable, grid: dict[str, Iterable[int]]) -> "SearchSpace":
        return cls(
            ResourceConfiguration(mt, int(n), machines[mt])
            for mt, counts in grid.items()
            for n in counts
        )


def _raw_features(c: ResourceConfiguration) -> tuple[float, ...]:
    return (
        float(c.node_count),
        float(c.per_node.vcpus),
        float(c.per_node.mem_gb),
        float(c.total_vcpus),
        float(c.total_mem_gb),
    )


# 69 configurations: 3 families x {large: 10, xlarge: 8, 2xlarge: 5} scale-outs.
DEFAULT_SCALEOUTS = {
    "large": (6, 8, 10, 12, 16, 20, 24, 32, 40, 48),
    "xlarge": (4, 5, 6, 8, 10, 12, 16, 24),
    "2xlarge": (4, 6, 8, 10, 12),
}


def default_space(machines: MachineTable | None = None) -> SearchSpace:
    machines = machines or MachineTable.default()
    grid = {}
    for family in ("c4", "m4", "r4"):
        for size, counts in DEFAULT_SCALEOUTS.items():
            grid[f"{family}.{size}"] = counts
    return SearchSpace.from_grid(machines, grid)
