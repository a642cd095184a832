"""Domain types and scheduling-state bookkeeping shared by schedulers and the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class SchedulingError(ValueError):
    """Raised for invalid plans, occupancy conflicts and bad indices."""


class InsufficientDevices(RuntimeError):
    """Not enough free devices to build a plan; the job has to wait."""

    def __init__(self, needed: int, available: int):
        super().__init__(f"need {needed} free devices, only {available} available")
        self.needed = needed
        self.available = available


@dataclass(frozen=True)
class DeviceProfile:
    id: int
    a: float
    mu: float
    data_sizes: tuple[int, ...]

    def __post_init__(self):
        if not (self.a > 0):
            raise ValueError(f"device {self.id}: a must be > 0, got {self.a}")
        if not (self.mu > 0):
            raise ValueError(f"device {self.id}: mu must be > 0, got {self.mu}")
        if any(d < 0 for d in self.data_sizes):
            raise ValueError(f"device {self.id}: negative data size")
        object.__setattr__(self, "data_sizes", tuple(int(d) for d in self.data_sizes))


@dataclass(frozen=True)
class JobSpec:
    id: int
    fraction: float
    local_epochs: int = 1
    batch_size: int = 10
    gamma: tuple[float, float, float] = (1.0, 1.0, 0.0)
    target_loss: float = 0.1
    alpha: float = 1.0
    beta: float = 1.0
    round_cap: Optional[int] = None
    target_accuracy: Optional[float] = None

    def __post_init__(self):
        if not (0 < self.fraction <= 1):
            raise ValueError(f"job {self.id}: fraction must be in (0, 1], got {self.fraction}")
        if self.local_epochs < 1:
            raise ValueError(f"job {self.id}: local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError(f"job {self.id}: batch_size must be >= 1")
        if len(self.gamma) != 3 or any(g < 0 for g in self.gamma):
            raise ValueError(f"job {self.id}: gamma must be three nonnegative numbers")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"job {self.id}: alpha and beta must be >= 0")
        if self.round_cap is not None and self.round_cap < 1:
            raise ValueError(f"job {self.id}: round_cap must be >= 1")
        object.__setattr__(self, "gamma", tuple(float(g) for g in self.gamma))

    def plan_size(self, n_devices: int) -> int:
        return plan_size(self.fraction, n_devices)


def plan_size(fraction: float, n_devices: int) -> int:
    """round(C*K) with halves rounded up, never below 1."""
    return max(1, int(math.floor(fraction * n_devices + 0.5)))


@dataclass(frozen=True)
class SchedulingPlan:
    job: int
    round: int
    devices: tuple[int, ...]

    def __post_init__(self):
        devices = tuple(int(d) for d in self.devices)
        if len(set(devices)) != len(devices):
            raise SchedulingError(f"plan for job {self.job} has duplicate devices: {devices}")
        object.__setattr__(self, "devices", devices)

    def __len__(self):
        return len(self.devices)

    def __iter__(self):
        return iter(self.devices)

    def indicator(self, n_devices: int) -> np.ndarray:
        vec = np.zeros(n_devices)
        vec[list(self.devices)] = 1.0
        return vec


class FrequencyVector:
    """Per-device participation counts for one job."""

    def __init__(self, counts: Sequence[int] | int):
        if isinstance(counts, (int, np.integer)):
            counts = np.zeros(int(counts), dtype=np.int64)
        self.counts = np.array(counts, dtype=np.int64)
        if self.counts.ndim != 1 or np.any(self.counts < 0):
            raise ValueError("counts must be a 1-d vector of nonnegative integers")

    def __len__(self):
        return len(self.counts)

    def __eq__(self, other):
        if isinstance(other, FrequencyVector):
            return np.array_equal(self.counts, other.counts)
        return NotImplemented

    def __repr__(self):
        return f"FrequencyVector({self.counts.tolist()})"

    def copy(self) -> "FrequencyVector":
        return FrequencyVector(self.counts.copy())


def _check_indices(devices, n: int):
    for d in devices:
        if not 0 <= d < n:
            raise SchedulingError(f"device index {d} out of range 0..{n - 1}")


def update_frequency(freqs: FrequencyVector, plan: SchedulingPlan | Sequence[int]) -> FrequencyVector:
    """Return a new vector with every scheduled device's count bumped by one."""
    devices = tuple(plan)
    _check_indices(devices, len(freqs))
    counts = freqs.counts.copy()
    counts[list(devices)] += 1
    return FrequencyVector(counts)


@dataclass
class OccupancySet:
    owner: dict[int, int] = field(default_factory=dict)

    @property
    def occupied(self) -> frozenset[int]:
        return frozenset(self.owner)

    def held_by(self, job: int) -> set[int]:
        return {d for d, j in self.owner.items() if j == job}

    def copy(self) -> "OccupancySet":
        return OccupancySet(dict(self.owner))

    def __eq__(self, other):
        return isinstance(other, OccupancySet) and self.owner == other.owner


def occupy(occ: OccupancySet, plan: SchedulingPlan) -> OccupancySet:
    clash = [d for d in plan.devices if d in occ.owner]
    if clash:
        raise SchedulingError(
            f"job {plan.job} cannot occupy devices {clash}: held by "
            f"{sorted({occ.owner[d] for d in clash})}"
        )
    owner = dict(occ.owner)
    for d in plan.devices:
        owner[d] = plan.job
    return OccupancySet(owner)


def release(occ: OccupancySet, plan: SchedulingPlan) -> OccupancySet:
    foreign = [d for d in plan.devices if occ.owner.get(d) != plan.job]
    if foreign:
        raise SchedulingError(f"job {plan.job} does not own devices {foreign}")
    owner = {d: j for d, j in occ.owner.items() if d not in set(plan.devices)}
    return OccupancySet(owner)


@dataclass
class RoundTrace:
    job: int
    round: int
    plan: SchedulingPlan
    wall_time: float
    time_cost: float
    fairness_cost: float
    total_cost: float
    beta_eff: float
    loss: float
    clock: float
    start: float = 0.0
    accuracy: Optional[float] = None
    selected_method: str = ""
    device_times: tuple[float, ...] = ()
    grad_norm_sq: Optional[float] = None
    # (method, plan devices, recost) for every meta-greedy candidate of this round
    candidates: tuple[tuple[str, tuple[int, ...], float], ...] = ()
