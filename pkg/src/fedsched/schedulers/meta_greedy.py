"""Meta-Greedy: run every constituent scheduler and keep the plan with the lowest dynamic cost."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from ..core import InsufficientDevices, SchedulingPlan
from .. import cost
from .base import Scheduler, SchedulerContext

PRIORITY = ("bods", "rlds", "genetic", "greedy", "fedcs", "random")


def recost(plan, job, freqs, r: int, devices, omega_kind: str = "sqrt", time_scale: float = 1.0) -> float:
    """Round cost with the fairness weight scaled by omega(r)."""
    if r < 1:
        raise ValueError(f"round must be >= 1, got {r}")
    return cost.round_cost(
        plan, job, freqs, r, devices, dynamic=True, omega_kind=omega_kind, time_scale=time_scale
    ).weighted_total


@dataclass(frozen=True)
class Candidate:
    method: str
    plan: SchedulingPlan
    recost: float


def meta_greedy_schedule(
    ctx: SchedulerContext, constituents: Sequence[Scheduler], omega_kind: str = "sqrt"
) -> tuple[SchedulingPlan, str, list[Candidate]]:
    """Ask each constituent (in priority order) for a plan and return the cheapest one."""
    if not constituents:
        raise ValueError("meta-greedy needs at least one constituent")
    order = sorted(constituents, key=lambda s: PRIORITY.index(s.name) if s.name in PRIORITY else len(PRIORITY))
    candidates = []
    for sched in order:
        try:
            plan = sched.schedule(ctx)
        except InsufficientDevices:
            continue
        value = recost(plan, ctx.job, ctx.freqs, ctx.round, ctx.devices, omega_kind, ctx.time_scale)
        candidates.append(Candidate(sched.name, plan, value))
    if not candidates:
        ctx.require_feasible()
        raise InsufficientDevices(ctx.size, len(ctx.pool))
    best = candidates[0]
    for cand in candidates[1:]:
        if cand.recost < best.recost:
            best = cand
    return best.plan, best.method, candidates


class MetaGreedyScheduler(Scheduler):
    name = "meta-greedy"
    dynamic_cost = True

    def __init__(self, constituents: Sequence[Scheduler], omega_kind: str = "sqrt"):
        self.constituents = list(constituents)
        self.omega_kind = omega_kind
        self.last: dict[int, tuple[str, list[Candidate]]] = {}
        self.wins: dict[str, int] = {}

    def schedule(self, ctx):
        plan, method, cands = meta_greedy_schedule(ctx, self.constituents, self.omega_kind)
        self.last[ctx.job.id] = (method, cands)
        return plan

    def annotation(self, job: int):
        method, cands = self.last.get(job, ("", []))
        return method, tuple((c.method, c.plan.devices, c.recost) for c in cands)

    def feedback(self, ctx, plan, outcome):
        self.wins[outcome.method] = self.wins.get(outcome.method, 0) + 1
        for sched in self.constituents:
            # the GP takes any (plan, cost) pair; the policy only learns from its own plans
            if sched.name == "bods" or sched.name == outcome.method:
                sched.feedback(ctx, plan, outcome)
