"""Scheduler context and the interface shared by every scheduling method."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence

import numpy as np

from ..core import (
    DeviceProfile,
    FrequencyVector,
    InsufficientDevices,
    JobSpec,
    SchedulingPlan,
)
from .. import cost


@dataclass
class SchedulerContext:
    """Snapshot of everything a scheduler may look at when planning one round of one job."""

    job: JobSpec
    round: int
    devices: Sequence[DeviceProfile]
    free: Sequence[int]
    freqs: FrequencyVector
    rng: np.random.Generator
    other_plans: Mapping[int, SchedulingPlan] = field(default_factory=dict)
    jobs: Optional[Sequence[JobSpec]] = None
    all_freqs: Optional[Mapping[int, FrequencyVector]] = None
    rounds: Optional[Mapping[int, int]] = None
    time_scales: Optional[Mapping[int, float]] = None

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def size(self) -> int:
        return self.job.plan_size(self.n_devices)

    @cached_property
    def exp_times(self) -> np.ndarray:
        return cost.expected_times(self.devices, self.job)

    @cached_property
    def pool(self) -> np.ndarray:
        """Free devices able to train this job, ascending by id."""
        free = np.array(sorted(set(int(d) for d in self.free)), dtype=np.int64)
        if len(free) == 0:
            return free
        return free[np.isfinite(self.exp_times[free])]

    @property
    def time_scale(self) -> float:
        if self.time_scales is None:
            return 1.0
        return self.time_scales[self.job.id]

    def require_feasible(self) -> None:
        if len(self.pool) < self.size:
            raise InsufficientDevices(self.size, len(self.pool))

    def make_plan(self, devices) -> SchedulingPlan:
        return SchedulingPlan(self.job.id, self.round, tuple(sorted(int(d) for d in devices)))

    def random_devices(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = self.rng if rng is None else rng
        return np.sort(rng.choice(self.pool, size=self.size, replace=False))

    # cost evaluation --------------------------------------------------------

    @cached_property
    def others_cost(self) -> float:
        """Plan-independent part of the total cost: the other jobs' plans in use."""
        if not self.other_plans or self.jobs is None:
            return 0.0
        total = 0.0
        for m, plan in self.other_plans.items():
            freqs = self.all_freqs[m] if self.all_freqs is not None else FrequencyVector(self.n_devices)
            r = self.rounds[m] if self.rounds is not None else self.round
            scale = self.time_scales[m] if self.time_scales is not None else 1.0
            total += cost.round_cost(plan, self.jobs[m], freqs, r, self.devices, time_scale=scale).weighted_total
        return total

    def own_costs(self, plans: np.ndarray, dynamic: bool = False, omega_kind: str = "sqrt") -> np.ndarray:
        """Round cost of this job for a batch of plans, shape (n_plans, size)."""
        plans = np.atleast_2d(np.asarray(plans, dtype=np.int64))
        times = self.exp_times[plans].max(axis=1) / self.time_scale
        fair = cost.fairness_costs(self.freqs.counts, plans)
        beta_eff = cost.effective_beta(self.job, self.round, dynamic, omega_kind)
        return self.job.alpha * times + beta_eff * fair

    def total_costs(self, plans: np.ndarray) -> np.ndarray:
        """Total cost across jobs for a batch of candidate plans of this job."""
        return self.own_costs(plans) + self.others_cost

    def breakdown(self, plan: SchedulingPlan, dynamic: bool = False, omega_kind: str = "sqrt") -> cost.CostBreakdown:
        return cost.round_cost(
            plan, self.job, self.freqs, self.round, self.devices,
            dynamic=dynamic, omega_kind=omega_kind, time_scale=self.time_scale,
        )


@dataclass(frozen=True)
class RoundOutcome:
    """What the simulator reports back after a plan has executed."""

    method: str
    own_cost: float
    total_cost: float
    times: tuple[float, ...] = ()


class Scheduler:
    """Base class. Subclasses implement :meth:`schedule`; learners override :meth:`feedback`."""

    name = "base"

    def schedule(self, ctx: SchedulerContext) -> SchedulingPlan:
        raise NotImplementedError

    def feedback(self, ctx: SchedulerContext, plan: SchedulingPlan, outcome: RoundOutcome) -> None:
        """Called once the round of ``plan`` has executed."""

    def annotation(self, job: int) -> tuple[str, tuple]:
        """Method tag and candidate list behind the last plan issued for ``job``."""
        return self.name, ()

    def __repr__(self):
        return f"{type(self).__name__}()"
