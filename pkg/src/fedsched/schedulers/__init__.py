"""Device scheduling methods behind a common :class:`Scheduler` interface."""

from __future__ import annotations

from dataclasses import dataclass, field

from .base import RoundOutcome, Scheduler, SchedulerContext
from .baselines import (
    FedCSScheduler,
    GeneticScheduler,
    GeneticSettings,
    GreedyScheduler,
    RandomScheduler,
    fedcs_schedule,
    genetic_schedule,
    greedy_schedule,
    random_schedule,
)
from .bods import BodsScheduler, BodsSettings, bods_schedule
from .meta_greedy import MetaGreedyScheduler, meta_greedy_schedule, recost
from .rlds import PolicyNetwork, RldsScheduler, RldsSettings

SCHEDULER_NAMES = ("random", "greedy", "fedcs", "genetic", "bods", "rlds", "meta-greedy")


@dataclass
class SchedulerSettings:
    genetic: GeneticSettings = field(default_factory=GeneticSettings)
    bods: BodsSettings = field(default_factory=BodsSettings)
    rlds: RldsSettings = field(default_factory=RldsSettings)
    fedcs_deadline: float | None = None
    fedcs_deadline_factor: float = 1.5
    omega: str = "sqrt"
    meta_constituents: tuple[str, ...] = ("bods", "rlds", "genetic", "greedy", "fedcs", "random")


def make_scheduler(name: str, settings: SchedulerSettings | None = None, seed: int = 0, policies=None) -> Scheduler:
    settings = settings or SchedulerSettings()
    if name == "random":
        return RandomScheduler()
    if name == "greedy":
        return GreedyScheduler()
    if name == "fedcs":
        return FedCSScheduler(settings.fedcs_deadline, settings.fedcs_deadline_factor)
    if name == "genetic":
        return GeneticScheduler(settings.genetic)
    if name == "bods":
        return BodsScheduler(settings.bods)
    if name == "rlds":
        return RldsScheduler(settings.rlds, seed=seed, nets=policies)
    if name == "meta-greedy":
        parts = []
        for part in settings.meta_constituents:
            if part == "meta-greedy" or part not in SCHEDULER_NAMES:
                raise ValueError(f"invalid meta-greedy constituent {part!r}")
            parts.append(make_scheduler(part, settings, seed, policies))
        return MetaGreedyScheduler(parts, settings.omega)
    raise ValueError(f"unknown scheduler {name!r}; choose from {', '.join(SCHEDULER_NAMES)}")


__all__ = [
    "SCHEDULER_NAMES",
    "BodsScheduler",
    "BodsSettings",
    "FedCSScheduler",
    "GeneticScheduler",
    "GeneticSettings",
    "GreedyScheduler",
    "MetaGreedyScheduler",
    "PolicyNetwork",
    "RandomScheduler",
    "RoundOutcome",
    "RldsScheduler",
    "RldsSettings",
    "Scheduler",
    "SchedulerContext",
    "SchedulerSettings",
    "bods_schedule",
    "fedcs_schedule",
    "genetic_schedule",
    "greedy_schedule",
    "make_scheduler",
    "meta_greedy_schedule",
    "random_schedule",
    "recost",
]
