"""Event-driven multi-job simulation over a shared device fleet."""

from __future__ import annotations

import heapq
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import cost, flengine
from .core import (
    DeviceProfile,
    FrequencyVector,
    InsufficientDevices,
    JobSpec,
    OccupancySet,
    RoundTrace,
    SchedulingError,
    SchedulingPlan,
    occupy,
    release,
    update_frequency,
)
from .schedulers import RoundOutcome, SchedulerContext, SchedulerSettings, make_scheduler

log = logging.getLogger(__name__)

ROUND_COMPLETE = 0
WANTS_SCHEDULE = 1

_STREAMS = {"times": 1, "sched": 2, "curve": 3, "data": 4, "sgd": 5, "pretrain": 6, "init": 7}


class SimulationError(RuntimeError):
    pass


@dataclass(order=True)
class SimEvent:
    time: float
    kind: int
    job: int
    seq: int


@dataclass
class MiniFLJob:
    model: str = "logreg"
    hidden: int = 16
    lr: float = 0.1
    lr_schedule: str = "constant"
    partition: str = "iid"
    n_classes: int = 10
    n_features: int = 20
    samples_per_class: int = 200
    separation: float = 3.0
    shards_per_class: int = 20
    track_grad: bool = False


@dataclass
class SimConfig:
    devices: Sequence[DeviceProfile]
    jobs: Sequence[JobSpec]
    scheduler: str = "random"
    mode: str = "curve"
    seed: int = 0
    kappa: float = 1.0
    round_spread: float = 0.3
    settings: SchedulerSettings = field(default_factory=SchedulerSettings)
    minifl: Mapping[int, MiniFLJob] = field(default_factory=dict)
    policies: Optional[Mapping] = None

    def __post_init__(self):
        if self.mode not in ("curve", "minifl"):
            raise ValueError(f"mode must be curve or minifl, got {self.mode!r}")
        ids = [j.id for j in self.jobs]
        if ids != list(range(len(ids))):
            raise ValueError("job ids must be 0..M-1 in order")
        if [d.id for d in self.devices] != list(range(len(self.devices))):
            raise ValueError("device ids must be 0..K-1 in order")
        for d in self.devices:
            if len(d.data_sizes) != len(self.jobs):
                raise ValueError(f"device {d.id} has {len(d.data_sizes)} data sizes for {len(self.jobs)} jobs")
        demand = sum(j.plan_size(len(self.devices)) for j in self.jobs)
        if demand > len(self.devices):
            log.warning("plan sizes add up to %d > %d devices; jobs will queue", demand, len(self.devices))


@dataclass
class JobSummary:
    job: int
    rounds: int
    reached: bool
    time_to_target: Optional[float]
    rounds_to_target: Optional[int]
    final_loss: float
    final_accuracy: Optional[float]
    total_wall_time: float
    total_cost: float
    finish_clock: float


@dataclass
class SimResult:
    config: SimConfig
    traces: dict[int, list[RoundTrace]]
    summary: dict[int, JobSummary]

    @property
    def all_rounds(self) -> list[RoundTrace]:
        rows = [t for m in sorted(self.traces) for t in self.traces[m]]
        return sorted(rows, key=lambda t: (t.clock, t.job, t.round))

    @property
    def total_time(self) -> float:
        """Sum of round times over all jobs and rounds."""
        return sum(s.total_wall_time for s in self.summary.values())


def stream(seed: int, name: str, job: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[name], job])


def fleet_time_scales(devices, jobs) -> dict[int, float]:
    out = {}
    for job in jobs:
        t = cost.expected_times(devices, job)
        t = t[np.isfinite(t)]
        out[job.id] = float(t.mean()) if len(t) else 1.0
    return out


def normalized_fairness(counts: np.ndarray, rounds: int, size: int) -> float:
    """Variance of the counts over its maximum r^2 p (1 - p), clipped to [0, 1]."""
    k = len(counts)
    p = size / k
    top = rounds * rounds * p * (1.0 - p)
    if rounds < 1 or top <= 0:
        return 0.0
    return float(min(1.0, max(0.0, np.var(counts) / top)))


def noise_sigma(spread: float, expected_rounds: int) -> float:
    """Per-round log-normal sigma making the round count's coefficient of variation ~ ``spread``."""
    if spread <= 0:
        return 0.0
    return math.sqrt(math.log1p(spread * spread * max(1, expected_rounds)))


def curve_loss_step(
    job: JobSpec,
    progress: float,
    fairness_norm: float,
    rng: np.random.Generator,
    kappa: float = 1.0,
    sigma: float = 0.0,
) -> tuple[float, float]:
    """Advance the effective round count and return (loss, new progress).

    Less fair participation shrinks the increment by 1/(1 + kappa * fairness);
    a mean-one log-normal factor perturbs it.
    """
    z = rng.standard_normal()
    step = 1.0 / (1.0 + kappa * fairness_norm)
    if sigma > 0:
        step *= math.exp(sigma * z - 0.5 * sigma * sigma)
    progress += step
    return cost.loss_estimate(progress, job.gamma), progress


def round_cap(job: JobSpec) -> int:
    if job.round_cap is not None:
        return job.round_cap
    return cost.estimate_round_cap(job)[1]


class Simulation:
    def __init__(self, config: SimConfig, scheduler=None):
        self.config = config
        self.jobs = list(config.jobs)
        self.devices = list(config.devices)
        self.K = len(self.devices)
        if config.mode == "minifl":
            self._setup_minifl()
        self.scheduler = scheduler or make_scheduler(
            config.scheduler, config.settings, config.seed, config.policies
        )
        self.time_scales = fleet_time_scales(self.devices, self.jobs)
        self.caps = {j.id: round_cap(j) for j in self.jobs}

    def _setup_minifl(self):
        self.datasets: dict[int, list[flengine.LocalDataset]] = {}
        self.models = {}
        self.weights = {}
        sizes = np.zeros((self.K, len(self.jobs)), dtype=int)
        for job in self.jobs:
            spec = self.config.minifl.get(job.id, MiniFLJob())
            rng = stream(self.config.seed, "data", job.id)
            X, y = flengine.make_blobs(
                rng, spec.n_classes, spec.n_features, spec.samples_per_class, spec.separation
            )
            parts = flengine.partition(X, y, self.K, spec.partition, rng, spec.shards_per_class)
            self.datasets[job.id] = parts
            sizes[:, job.id] = [p.size for p in parts]
            model = flengine.make_model(spec.model, spec.n_features, spec.n_classes, spec.hidden)
            self.models[job.id] = model
            self.weights[job.id] = model.init(stream(self.config.seed, "init", job.id))
        self.devices = [
            DeviceProfile(d.id, d.a, d.mu, tuple(int(s) for s in sizes[d.id])) for d in self.devices
        ]

    def _rlds_instances(self):
        sched = self.scheduler
        parts = getattr(sched, "constituents", [sched])
        return [s for s in parts if s.name == "rlds"]

    def _pretrain(self):
        rounds = self.config.settings.rlds.pretrain_rounds
        if rounds <= 0 or self.config.policies:
            return
        for inst in self._rlds_instances():
            inst.pretrain(self.jobs, self.devices, rounds, stream(self.config.seed, "pretrain"), self.time_scales)

    # ------------------------------------------------------------------

    def run(self) -> SimResult:
        cfg = self.config
        self._pretrain()
        M = len(self.jobs)
        self.freqs = {j.id: FrequencyVector(self.K) for j in self.jobs}
        self.occ = OccupancySet()
        self.completed = {j.id: 0 for j in self.jobs}
        self.progress = {j.id: 0.0 for j in self.jobs}
        self.done = {j.id: False for j in self.jobs}
        self.traces = {j.id: [] for j in self.jobs}
        self.running: dict[int, tuple] = {}
        self.sigmas = {}
        for job in self.jobs:
            try:
                expected = cost.estimate_round_cap(job)[0]
            except ValueError:
                expected = self.caps[job.id]
            self.sigmas[job.id] = noise_sigma(cfg.round_spread, expected)
        self.rng = {
            name: {j.id: stream(cfg.seed, name, j.id) for j in self.jobs}
            for name in ("times", "sched", "curve", "sgd")
        }
        self.queue: list[SimEvent] = []
        self.seq = 0
        self.waiting: deque[int] = deque()
        for m in range(M):
            self._push(0.0, WANTS_SCHEDULE, m)
        while self.queue:
            ev = heapq.heappop(self.queue)
            if ev.kind == ROUND_COMPLETE:
                self._complete(ev.job, ev.time)
            else:
                self.waiting.append(ev.job)
            self._dispatch(ev.time)
        unfinished = [m for m, d in self.done.items() if not d]
        if unfinished:
            free = self.K - len(self.occ.owner)
            needs = {m: self.jobs[m].plan_size(self.K) for m in unfinished}
            able = {m: int(sum(d.data_sizes[m] > 0 for d in self.devices)) for m in unfinished}
            raise SimulationError(
                f"deadlock: jobs {unfinished} starved with no pending events; "
                f"K={self.K}, free={free}, plan sizes={needs}, devices with data={able}"
            )
        return SimResult(cfg, self.traces, self._summarize())

    def _push(self, t: float, kind: int, job: int):
        heapq.heappush(self.queue, SimEvent(t, kind, job, self.seq))
        self.seq += 1

    def _context(self, job: JobSpec, free) -> SchedulerContext:
        m = job.id
        return SchedulerContext(
            job=job,
            round=self.completed[m] + 1,
            devices=self.devices,
            free=free,
            freqs=self.freqs[m].copy(),
            rng=self.rng["sched"][m],
            other_plans={j: v[0] for j, v in self.running.items() if j != m},
            jobs=self.jobs,
            all_freqs={j: f.copy() for j, f in self.freqs.items()},
            rounds={j: self.completed[j] + 1 for j in self.freqs},
            time_scales=self.time_scales,
        )

    def _dispatch(self, now: float):
        while self.waiting:
            m = self.waiting[0]
            job = self.jobs[m]
            free = [d for d in range(self.K) if d not in self.occ.owner]
            ctx = self._context(job, free)
            if len(ctx.pool) < ctx.size:
                return
            try:
                plan = self.scheduler.schedule(ctx)
            except InsufficientDevices:
                return
            self._validate(plan, ctx)
            self.occ = occupy(self.occ, plan)
            method, candidates = self.scheduler.annotation(m)
            times_rng = self.rng["times"][m]
            times = tuple(cost.sample_device_time(self.devices[d], job, times_rng) for d in plan.devices)
            wall = cost.round_time(times)
            self.running[m] = (plan, now, times, ctx, method, candidates)
            self._push(now + wall, ROUND_COMPLETE, m)
            self.waiting.popleft()

    def _validate(self, plan: SchedulingPlan, ctx: SchedulerContext):
        if plan.job != ctx.job.id or plan.round != ctx.round:
            raise SchedulingError(f"plan labelled job {plan.job} round {plan.round}, expected {ctx.job.id}/{ctx.round}")
        if len(plan) != ctx.size:
            raise SchedulingError(f"plan for job {plan.job} has {len(plan)} devices, expected {ctx.size}")
        bad = set(plan.devices) - set(ctx.pool.tolist())
        if bad:
            raise SchedulingError(f"plan for job {plan.job} uses unavailable devices {sorted(bad)}")

    def _complete(self, m: int, now: float):
        plan, start, times, ctx, method, candidates = self.running.pop(m)
        job = self.jobs[m]
        self.occ = release(self.occ, plan)
        r = self.completed[m] + 1
        self.completed[m] = r
        before = self.freqs[m]
        self.freqs[m] = update_frequency(before, plan)
        wall = cost.round_time(times)
        time_cost = wall / self.time_scales[m]
        fair = cost.fairness_cost(before, plan)
        dynamic = getattr(self.scheduler, "dynamic_cost", False)
        beta_eff = cost.effective_beta(job, r, dynamic, self.config.settings.omega)
        total = job.alpha * time_cost + beta_eff * fair

        accuracy = None
        grad_sq = None
        if self.config.mode == "curve":
            nf = normalized_fairness(self.freqs[m].counts, r, len(plan))
            loss, self.progress[m] = curve_loss_step(
                job, self.progress[m], nf, self.rng["curve"][m], self.config.kappa, self.sigmas[m]
            )
        else:
            loss, accuracy, grad_sq = self._train_round(m, plan, r)

        # realized total cost: this job's executed plan plus the other plans in use
        own = job.alpha * time_cost + job.beta * fair
        realized = own
        for j, (other, *_rest) in self.running.items():
            realized += cost.round_cost(
                other, self.jobs[j], self.freqs[j], self.completed[j] + 1, self.devices,
                time_scale=self.time_scales[j],
            ).weighted_total
        self.scheduler.feedback(ctx, plan, RoundOutcome(method, own, realized, times))

        self.traces[m].append(
            RoundTrace(
                job=m, round=r, plan=plan, wall_time=wall, time_cost=time_cost,
                fairness_cost=fair, total_cost=total, beta_eff=beta_eff, loss=loss,
                clock=now, start=start, accuracy=accuracy, selected_method=method,
                device_times=times, grad_norm_sq=grad_sq, candidates=candidates,
            )
        )
        if self._target_met(job, loss, accuracy) or r >= self.caps[m]:
            self.done[m] = True
        else:
            self._push(now, WANTS_SCHEDULE, m)

    def _train_round(self, m: int, plan: SchedulingPlan, r: int):
        spec = self.config.minifl.get(m, MiniFLJob())
        job = self.jobs[m]
        model = self.models[m]
        data = self.datasets[m]
        lr = spec.lr
        if spec.lr_schedule == "inv_sqrt":
            sizes = [data[d].size for d in plan.devices]
            H = flengine.local_steps(int(np.mean(sizes)), job.local_epochs, job.batch_size)
            lr = spec.lr / math.sqrt(r * H)
        elif spec.lr_schedule != "constant":
            raise ValueError(f"unknown lr schedule {spec.lr_schedule!r}")
        w = self.weights[m]
        rng = self.rng["sgd"][m]
        locals_ = [
            (flengine.local_update(w, data[d], model, job.local_epochs, job.batch_size, lr, rng), data[d].size)
            for d in plan.devices
        ]
        self.weights[m] = flengine.fedavg_aggregate(locals_)
        loss, acc = flengine.global_loss(model, self.weights[m], data)
        grad_sq = None
        if spec.track_grad:
            g = flengine.global_gradient(model, self.weights[m], data)
            grad_sq = float(g @ g)
        return loss, acc, grad_sq

    @staticmethod
    def _target_met(job: JobSpec, loss: float, accuracy: Optional[float]) -> bool:
        if job.target_accuracy is not None and accuracy is not None:
            return accuracy >= job.target_accuracy
        return loss <= job.target_loss

    def _summarize(self) -> dict[int, JobSummary]:
        out = {}
        for job in self.jobs:
            rows = self.traces[job.id]
            hit = next((t for t in rows if self._target_met(job, t.loss, t.accuracy)), None)
            out[job.id] = JobSummary(
                job=job.id,
                rounds=len(rows),
                reached=hit is not None,
                time_to_target=hit.clock if hit else None,
                rounds_to_target=hit.round if hit else None,
                final_loss=rows[-1].loss if rows else math.nan,
                final_accuracy=rows[-1].accuracy if rows else None,
                total_wall_time=sum(t.wall_time for t in rows),
                total_cost=sum(t.total_cost for t in rows),
                finish_clock=rows[-1].clock if rows else 0.0,
            )
        return out


def run(config: SimConfig, scheduler=None) -> SimResult:
    return Simulation(config, scheduler).run()


def audit_occupancy(rounds: Sequence[RoundTrace]) -> list[str]:
    """Return a description of every instant where two jobs held the same device."""
    events = []
    for t in rounds:
        events.append((t.clock, 0, t))
        events.append((t.start, 1, t))
    events.sort(key=lambda e: (e[0], e[1], e[2].job, e[2].round))
    holder: dict[int, tuple[int, int]] = {}
    problems = []
    for time, kind, t in events:
        if kind == 0:
            for d in t.plan.devices:
                if holder.get(d) == (t.job, t.round):
                    del holder[d]
        else:
            for d in t.plan.devices:
                if d in holder:
                    problems.append(f"t={time}: device {d} held by job/round {holder[d]} and {(t.job, t.round)}")
                holder[d] = (t.job, t.round)
    return problems
