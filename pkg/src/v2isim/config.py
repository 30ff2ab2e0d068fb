"""Scenario configuration: network constants, task and machine catalogs, JSON loading."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, replace
from typing import Any


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class TaskType:
    """A task class an AV may request, with its latency budget.

    max_steps is the number of processing time steps after which the task is
    dropped by the edge machine; by default it is latency_budget_ms / time_step_ms.
    dl_packet_bits may be None, in which case the scenario-wide default applies.
    """

    id: int
    latency_budget_ms: float
    max_steps: int
    dl_packet_bits: int | None = None

    def validate(self) -> None:
        if self.latency_budget_ms <= 0:
            raise ConfigError(f"task {self.id}: latency_budget_ms must be > 0")
        if self.max_steps < 1:
            raise ConfigError(f"task {self.id}: max_steps must be >= 1")
        if self.dl_packet_bits is not None and self.dl_packet_bits <= 0:
            raise ConfigError(f"task {self.id}: dl_packet_bits must be > 0")


@dataclass(frozen=True)
class MachineType:
    """An edge-computing machine class; exec_stats maps task id -> (mean, std) in steps."""

    id: int
    exec_stats: dict[int, tuple[float, float]]

    def validate(self, task_ids: list[int]) -> None:
        for tid in task_ids:
            if tid not in self.exec_stats:
                raise ConfigError(f"machine {self.id}: no exec_stats entry for task {tid}")
        for tid, (mean, std) in self.exec_stats.items():
            if mean <= 0 or std <= 0:
                raise ConfigError(
                    f"machine {self.id}, task {tid}: mean_steps and std_steps must be > 0"
                )


def default_task_catalog() -> list[TaskType]:
    # Budgets 20/50/100 ms; one processing step = 1 ms by default, so a task is
    # dropped once its queue completion alone would blow the whole budget.
    return [
        TaskType(id=1, latency_budget_ms=20.0, max_steps=20),
        TaskType(id=2, latency_budget_ms=50.0, max_steps=50),
        TaskType(id=3, latency_budget_ms=100.0, max_steps=100),
    ]


def default_machine_catalog() -> list[MachineType]:
    return [
        MachineType(id=1, exec_stats={1: (1.0, 0.5), 2: (2.0, 0.5), 3: (5.0, 0.5)}),
        MachineType(id=2, exec_stats={1: (2.0, 0.5), 2: (4.0, 0.5), 3: (10.0, 0.5)}),
    ]


@dataclass(frozen=True)
class ScenarioConfig:
    """Static parameters of one network instance.

    Powers are linear milliwatts except noise_power_dbm. Antenna gains are linear.
    The system downlink band is n_subchannels * subchannel_bw; the uplink uses one
    additional shared subchannel outside that set.
    """

    area_side: float = 100.0
    n_sbs: int = 10
    n_av: int = 40
    n_subchannels: int = 555  # floor(100 MHz / 180 kHz)
    subchannel_bw: float = 180e3
    tti_ms: float = 0.125
    time_step_ms: float = 1.0
    sbs_tx_power_mw: float = 100.0
    av_tx_power_mw: float = 10.0
    noise_power_dbm: float = -90.0
    antenna_gain_sbs: float = 1.0
    antenna_gain_av: float = 1.0
    alpha: float = 20000.0
    # Weight applied to latency terms (ms) wherever they are traded against the
    # bandwidth price alpha / w_mn inside SBS utilities.  alpha=20k and w=180 kHz
    # put the price at ~0.111 per subchannel step, so millisecond latencies need
    # a down-scale of this order to land in the same numeric range.
    utility_latency_scale: float = 0.003
    dl_packet_bits: int = 5000
    ul_packet_bits: int = 100
    pathloss_ref_db: float = 38.0
    pathloss_exponent: float = 3.0
    worst_case_interference: bool = False
    task_catalog: tuple[TaskType, ...] = field(
        default_factory=lambda: tuple(default_task_catalog())
    )
    machine_catalog: tuple[MachineType, ...] = field(
        default_factory=lambda: tuple(default_machine_catalog())
    )
    seed: int = 0

    # -- derived quantities ------------------------------------------------

    @property
    def noise_power_mw(self) -> float:
        return 10.0 ** (self.noise_power_dbm / 10.0)

    @property
    def system_bandwidth_hz(self) -> float:
        return self.n_subchannels * self.subchannel_bw

    @property
    def tti_s(self) -> float:
        return self.tti_ms / 1e3

    def task_by_id(self, task_id: int) -> TaskType:
        for t in self.task_catalog:
            if t.id == task_id:
                return t
        raise KeyError(f"unknown task id {task_id}")

    def machine_by_id(self, machine_id: int) -> MachineType:
        for m in self.machine_catalog:
            if m.id == machine_id:
                return m
        raise KeyError(f"unknown machine id {machine_id}")

    def packet_bits(self, task_id: int) -> int:
        t = self.task_by_id(task_id)
        return t.dl_packet_bits if t.dl_packet_bits is not None else self.dl_packet_bits

    def validate(self) -> None:
        if self.n_subchannels < 1:
            raise ConfigError("n_subchannels must be >= 1")
        if self.subchannel_bw <= 0:
            raise ConfigError("subchannel_bw must be > 0")
        if self.tti_ms <= 0:
            raise ConfigError("tti_ms must be > 0")
        if self.time_step_ms <= 0:
            raise ConfigError("time_step_ms must be > 0")
        if self.area_side <= 0:
            raise ConfigError("area_side must be > 0")
        if self.n_sbs < 0 or self.n_av < 0:
            raise ConfigError("n_sbs and n_av must be >= 0")
        for name in ("sbs_tx_power_mw", "av_tx_power_mw", "antenna_gain_sbs", "antenna_gain_av"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be strictly positive")
        if self.dl_packet_bits <= 0 or self.ul_packet_bits <= 0:
            raise ConfigError("packet sizes must be > 0")
        if self.utility_latency_scale <= 0:
            raise ConfigError("utility_latency_scale must be > 0")
        if not (0 <= self.seed < 2**64):
            raise ConfigError("seed must fit in 64 unsigned bits")
        if not self.task_catalog:
            raise ConfigError("task_catalog must not be empty")
        if not self.machine_catalog:
            raise ConfigError("machine_catalog must not be empty")
        task_ids = [t.id for t in self.task_catalog]
        if len(set(task_ids)) != len(task_ids):
            raise ConfigError("task ids must be unique")
        for t in self.task_catalog:
            t.validate()
        machine_ids = [m.id for m in self.machine_catalog]
        if len(set(machine_ids)) != len(machine_ids):
            raise ConfigError("machine ids must be unique")
        for m in self.machine_catalog:
            m.validate(task_ids)

    def with_overrides(self, **kwargs: Any) -> "ScenarioConfig":
        cfg = replace(self, **kwargs)
        cfg.validate()
        return cfg


# -- JSON ingestion ---------------------------------------------------------

_SCALAR_KEYS = {
    f.name for f in fields(ScenarioConfig) if f.name not in ("task_catalog", "machine_catalog")
}


def config_from_dict(data: dict[str, Any]) -> ScenarioConfig:
    """Build a ScenarioConfig from a parsed JSON object; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ConfigError("config root must be a JSON object")
    step_ms = float(data.get("time_step_ms", ScenarioConfig.time_step_ms))
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key == "task_catalog":
            kwargs[key] = tuple(_task_from_dict(item, step_ms) for item in value)
        elif key == "machine_catalog":
            kwargs[key] = tuple(_machine_from_dict(item) for item in value)
        elif key in _SCALAR_KEYS:
            kwargs[key] = value
        else:
            raise ConfigError(f"unknown config key: {key!r}")
    cfg = ScenarioConfig(**kwargs)
    cfg.validate()
    return cfg


def _task_from_dict(data: dict[str, Any], step_ms: float) -> TaskType:
    allowed = {"id", "latency_budget_ms", "max_steps", "dl_packet_bits"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown task_catalog keys: {sorted(unknown)}")
    if "id" not in data or "latency_budget_ms" not in data:
        raise ConfigError("task_catalog entries need at least 'id' and 'latency_budget_ms'")
    max_steps = data.get("max_steps")
    if max_steps is None:
        # Default drop threshold: the full E2E budget spent on compute alone.
        max_steps = max(1, int(round(float(data["latency_budget_ms"]) / step_ms)))
    return TaskType(
        id=int(data["id"]),
        latency_budget_ms=float(data["latency_budget_ms"]),
        max_steps=int(max_steps),
        dl_packet_bits=data.get("dl_packet_bits"),
    )


def _machine_from_dict(data: dict[str, Any]) -> MachineType:
    allowed = {"id", "exec_stats"}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"unknown machine_catalog keys: {sorted(unknown)}")
    if "id" not in data or "exec_stats" not in data:
        raise ConfigError("machine_catalog entries need 'id' and 'exec_stats'")
    stats = {
        int(tid): (float(ms[0]), float(ms[1])) for tid, ms in data["exec_stats"].items()
    }
    return MachineType(id=int(data["id"]), exec_stats=stats)


def load_config(path: str) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    return config_from_dict(data)
