"""Comparison schedulers: Random, Greedy, FedCS and a fixed-size-subset genetic algorithm."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..core import SchedulingPlan
from .base import Scheduler, SchedulerContext


def random_schedule(ctx: SchedulerContext) -> SchedulingPlan:
    ctx.require_feasible()
    return ctx.make_plan(ctx.random_devices())


def _fastest(ctx: SchedulerContext, candidates: np.ndarray, n: int) -> np.ndarray:
    order = np.lexsort((candidates, ctx.exp_times[candidates]))
    return candidates[order[:n]]


def greedy_schedule(ctx: SchedulerContext) -> SchedulingPlan:
    """Pick the devices with the smallest expected time, lower id first on ties."""
    ctx.require_feasible()
    return ctx.make_plan(_fastest(ctx, ctx.pool, ctx.size))


def default_deadline(ctx: SchedulerContext, factor: float = 1.5) -> float:
    times = ctx.exp_times[np.isfinite(ctx.exp_times)]
    return float(np.median(times)) * factor


def fedcs_schedule(ctx: SchedulerContext, deadline: float | None = None, factor: float = 1.5) -> SchedulingPlan:
    """Deadline-filtered random selection, topped up with the fastest leftovers."""
    ctx.require_feasible()
    if deadline is None:
        deadline = default_deadline(ctx, factor)
    shuffled = ctx.rng.permutation(ctx.pool)
    chosen = [d for d in shuffled if ctx.exp_times[d] <= deadline][: ctx.size]
    if len(chosen) < ctx.size:
        rest = np.array([d for d in ctx.pool if d not in set(chosen)], dtype=np.int64)
        chosen.extend(_fastest(ctx, rest, ctx.size - len(chosen)))
    return ctx.make_plan(chosen)


@dataclass
class GeneticSettings:
    pop: int = 30
    gens: int = 30
    pmut: float = 0.1
    tournament: int = 2


def _top(keys: np.ndarray, size: int) -> np.ndarray:
    """Column indices of the ``size`` largest keys per row, ascending."""
    return np.sort(np.argpartition(-keys, size - 1, axis=1)[:, :size], axis=1)


def _breed(parents_a, parents_b, size: int, pmut: float, rng) -> np.ndarray:
    """Uniform subset crossover repaired to ``size`` members, then swap mutation.

    Parents and children are boolean membership masks over the pool.
    Shared genes are always inherited; the rest of the child is filled from
    genes carried by exactly one parent, chosen uniformly at random.
    """
    n, width = parents_a.shape
    common = parents_a & parents_b
    differ = parents_a ^ parents_b
    keys = 2.0 * common + differ * (1.0 + rng.random((n, width)))
    child = np.zeros((n, width), dtype=bool)
    np.put_along_axis(child, _top(keys, size), True, axis=1)
    if pmut > 0 and width > size:
        mutate = child & (rng.random((n, width)) < pmut)
        outsiders = np.argsort(np.where(child, np.inf, rng.random((n, width))), axis=1)
        for i in np.flatnonzero(mutate.any(axis=1)):
            # each mutated member swaps with a random outsider
            drop = np.flatnonzero(mutate[i])[: width - size]
            child[i, drop] = False
            child[i, outsiders[i, : len(drop)]] = True
    return child


def evolve(ctx: SchedulerContext, settings: GeneticSettings) -> tuple[np.ndarray, list[float]]:
    """Run the GA; return the best plan found and the elite cost after each generation."""
    ctx.require_feasible()
    rng, pool, size = ctx.rng, ctx.pool, ctx.size
    pop = max(1, settings.pop)
    width = len(pool)
    members = _top(rng.random((pop, width)), size)
    costs = ctx.total_costs(pool[members])
    history = [float(costs.min())]
    for _ in range(settings.gens):
        elite = int(np.argmin(costs))
        masks = np.zeros((pop, width), dtype=bool)
        np.put_along_axis(masks, members, True, axis=1)
        n_child = pop - 1
        if n_child > 0:
            entrants = rng.integers(pop, size=(2, n_child, settings.tournament))
            winners = np.take_along_axis(entrants, np.argmin(costs[entrants], axis=2)[..., None], axis=2)[..., 0]
            kids = _breed(masks[winners[0]], masks[winners[1]], size, settings.pmut, rng)
            kid_members = np.sort(np.argsort(~kids, axis=1, kind="stable")[:, :size], axis=1)
            members = np.vstack([members[elite : elite + 1], kid_members])
            costs = np.concatenate([costs[elite : elite + 1], ctx.total_costs(pool[kid_members])])
        history.append(float(costs.min()))
    return pool[members[int(np.argmin(costs))]], history


def genetic_schedule(ctx: SchedulerContext, settings: GeneticSettings | None = None) -> SchedulingPlan:
    best, _ = evolve(ctx, settings or GeneticSettings())
    return ctx.make_plan(best)


class RandomScheduler(Scheduler):
    name = "random"

    def schedule(self, ctx):
        return random_schedule(ctx)


class GreedyScheduler(Scheduler):
    name = "greedy"

    def schedule(self, ctx):
        return greedy_schedule(ctx)


class FedCSScheduler(Scheduler):
    name = "fedcs"

    def __init__(self, deadline: float | None = None, deadline_factor: float = 1.5):
        self.deadline = deadline
        self.deadline_factor = deadline_factor

    def schedule(self, ctx):
        return fedcs_schedule(ctx, self.deadline, self.deadline_factor)


class GeneticScheduler(Scheduler):
    name = "genetic"

    def __init__(self, settings: GeneticSettings | None = None):
        self.settings = settings or GeneticSettings()

    def schedule(self, ctx):
        return genetic_schedule(ctx, self.settings)
