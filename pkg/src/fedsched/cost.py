"""Timing and cost arithmetic: device time model, round time, fairness, round cost, loss curve."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import DeviceProfile, FrequencyVector, JobSpec, SchedulingError, SchedulingPlan

ROUND_CAP_SLACK = 0.3
_CEIL_TOL = 1e-9


@dataclass(frozen=True)
class CostBreakdown:
    time_term: float
    fairness_term: float
    weighted_total: float
    beta_eff: float
    alpha: float = 1.0


def _data_size(dev: DeviceProfile, job: JobSpec) -> int:
    size = dev.data_sizes[job.id]
    if size <= 0:
        raise SchedulingError(f"device {dev.id} holds no data for job {job.id}")
    return size


def sample_device_time(dev: DeviceProfile, job: JobSpec, rng: np.random.Generator) -> float:
    """Draw one round duration from the shifted exponential model."""
    size = _data_size(dev, job)
    shift = job.local_epochs * dev.a * size
    scale = job.local_epochs * size / dev.mu
    return shift + rng.exponential(scale)


def expected_device_time(dev: DeviceProfile, job: JobSpec) -> float:
    size = _data_size(dev, job)
    return job.local_epochs * size * (dev.a + 1.0 / dev.mu)


def expected_times(devices: Sequence[DeviceProfile], job: JobSpec) -> np.ndarray:
    """Expected time of every device for ``job``; ``inf`` where the device has no data."""
    out = np.full(len(devices), np.inf)
    for i, dev in enumerate(devices):
        if dev.data_sizes[job.id] > 0:
            out[i] = expected_device_time(dev, job)
    return out


def round_time(times) -> float:
    times = list(times)
    if not times:
        raise SchedulingError("round time of an empty plan")
    return float(max(times))


def _variance_after(counts: np.ndarray, devices) -> float:
    after = counts.astype(float)
    after[list(devices)] += 1.0
    return float(np.mean((after - after.mean()) ** 2))


def fairness_cost(freqs: FrequencyVector, plan: SchedulingPlan | Sequence[int]) -> float:
    """Population variance of the participation counts once ``plan`` is counted."""
    devices = tuple(plan)
    n = len(freqs)
    for d in devices:
        if not 0 <= d < n:
            raise SchedulingError(f"device index {d} out of range 0..{n - 1}")
    return _variance_after(freqs.counts, devices)


def fairness_costs(counts: np.ndarray, plans: np.ndarray) -> np.ndarray:
    """Vectorized fairness for a batch of plans given as an (n_plans, size) index array."""
    counts = np.asarray(counts, dtype=float)
    plans = np.asarray(plans, dtype=np.int64)
    k = len(counts)
    size = plans.shape[1]
    total = counts.sum() + size
    sq = (counts**2).sum() + 2.0 * counts[plans].sum(axis=1) + size
    var = sq / k - (total / k) ** 2
    return np.maximum(var, 0.0)


def omega(r: int, kind: str = "sqrt") -> float:
    if r < 1:
        raise ValueError(f"round must be >= 1, got {r}")
    if kind == "sqrt":
        return math.sqrt(r)
    if kind == "linear":
        return float(r)
    if kind == "log":
        return math.log(r)
    raise ValueError(f"unknown omega {kind!r}; expected sqrt, linear or log")


def effective_beta(job: JobSpec, r: int, dynamic: bool = False, omega_kind: str = "sqrt") -> float:
    if not dynamic:
        return job.beta
    return job.beta * omega(r, omega_kind)


def round_cost(
    plan: SchedulingPlan | Sequence[int],
    job: JobSpec,
    freqs: FrequencyVector,
    r: int,
    devices: Sequence[DeviceProfile],
    dynamic: bool = False,
    omega_kind: str = "sqrt",
    time_scale: float = 1.0,
    times: Sequence[float] | None = None,
) -> CostBreakdown:
    """Weighted time + fairness cost of one job's plan.

    The time term is the slowest member's expected time (or the given
    realized ``times``) divided by ``time_scale``.
    """
    members = tuple(plan)
    if not members:
        raise SchedulingError("cost of an empty plan")
    if times is None:
        times = [expected_device_time(devices[d], job) for d in members]
    time_term = round_time(times) / time_scale
    fair = fairness_cost(freqs, members)
    beta_eff = effective_beta(job, r, dynamic, omega_kind)
    return CostBreakdown(
        time_term=time_term,
        fairness_term=fair,
        weighted_total=job.alpha * time_term + beta_eff * fair,
        beta_eff=beta_eff,
        alpha=job.alpha,
    )


def total_cost(
    plans: Mapping[int, SchedulingPlan | Sequence[int]],
    jobs: Sequence[JobSpec],
    freqs: Mapping[int, FrequencyVector],
    rounds: Mapping[int, int] | int,
    devices: Sequence[DeviceProfile],
    dynamic: bool = False,
    omega_kind: str = "sqrt",
    time_scales: Mapping[int, float] | None = None,
    times: Mapping[int, Sequence[float]] | None = None,
) -> float:
    """Sum of round costs over all jobs that currently hold a plan."""
    seen: dict[int, int] = {}
    for m, plan in plans.items():
        for d in plan:
            if d in seen:
                raise SchedulingError(f"device {d} is in the plans of jobs {seen[d]} and {m}")
            seen[d] = m
    total = 0.0
    for m, plan in plans.items():
        r = rounds if isinstance(rounds, int) else rounds[m]
        scale = 1.0 if time_scales is None else time_scales[m]
        t = None if times is None else times.get(m)
        total += round_cost(
            plan, jobs[m], freqs[m], r, devices, dynamic, omega_kind, scale, t
        ).weighted_total
    return total


def loss_estimate(r: float, gamma: Sequence[float]) -> float:
    g0, g1, g2 = gamma
    denom = g0 * r + g1
    if g0 == 0 and g1 == 0:
        raise ValueError("degenerate loss curve: gamma0 = gamma1 = 0")
    if denom <= 0:
        raise ValueError(f"loss curve undefined at r={r}")
    return 1.0 / denom + g2


def _ceil(x: float) -> int:
    return int(math.ceil(x - _CEIL_TOL))


def estimate_round_cap(job: JobSpec) -> tuple[int, int]:
    """Return (rounds estimated from the loss curve, round cap with 30% slack)."""
    g0, g1, g2 = job.gamma
    if job.target_loss <= g2:
        raise ValueError(
            f"job {job.id}: target loss {job.target_loss} is not above the curve asymptote {g2}"
        )
    need = 1.0 / (job.target_loss - g2) - g1
    if g0 == 0:
        if need > 0:
            raise ValueError(f"job {job.id}: target loss unreachable with gamma0 = 0")
        r_c = 1
    else:
        r_c = max(1, _ceil(need / g0))
    return r_c, max(1, _ceil((1.0 + ROUND_CAP_SLACK) * r_c))
