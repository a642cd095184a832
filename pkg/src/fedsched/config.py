"""INI experiment files and environment overrides.

Layout::

    [experiment]
    schedulers = random, greedy
    seeds = 0, 1, 2
    mode = curve

    [devices.fast]
    count = 30
    a = 0.001, 0.003        # uniform range, or a single value
    mu = 200, 1000
    data_size = 50, 150     # integer range per job; mini-FL mode uses the partition sizes

    [job.0]
    fraction = 0.1
    gamma = 0.25, 1, 0.2
    target_loss = 0.3

Scheduler knobs live in ``[bods]``, ``[rlds]``, ``[genetic]``, ``[fedcs]`` and
``[meta_greedy]``. Mini-FL settings (``model``, ``lr``, ``partition``...) go in
the job sections.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .core import DeviceProfile, JobSpec
from .schedulers import SCHEDULER_NAMES, SchedulerSettings
from .schedulers.baselines import GeneticSettings
from .schedulers.bods import BodsSettings
from .schedulers.rlds import RldsSettings, load_policies
from .simulator import MiniFLJob, SimConfig

ENV_PREFIX = "FEDSCHED_"
ABLATIONS = ("none", "beta-zero", "alpha-zero", "omega")
OMEGAS = ("sqrt", "linear", "log")


class ConfigError(ValueError):
    """Bad or incomplete experiment configuration."""


@dataclass
class DeviceClass:
    name: str
    count: int
    a: tuple[float, float]
    mu: tuple[float, float]
    data_size: tuple[int, int]


@dataclass
class ExperimentSpec:
    jobs: list[JobSpec]
    device_classes: list[DeviceClass]
    schedulers: list[str] = field(default_factory=lambda: ["random"])
    seeds: list[int] = field(default_factory=lambda: [0])
    mode: str = "curve"
    ablation: str = "none"
    out_dir: str = "results"
    kappa: float = 1.0
    round_spread: float = 0.3
    fleet_seed: Optional[int] = None
    settings: SchedulerSettings = field(default_factory=SchedulerSettings)
    minifl: dict[int, MiniFLJob] = field(default_factory=dict)
    source: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seed list must not be empty")
        if not self.schedulers:
            raise ConfigError("scheduler list must not be empty")
        for s in self.schedulers:
            if s not in SCHEDULER_NAMES:
                raise ConfigError(f"unknown scheduler {s!r}; choose from {', '.join(SCHEDULER_NAMES)}")
        if self.mode not in ("curve", "minifl"):
            raise ConfigError(f"mode must be curve or minifl, got {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {', '.join(ABLATIONS)}, got {self.ablation!r}")
        if not self.jobs:
            raise ConfigError("at least one [job.N] section is required")
        if not self.device_classes:
            raise ConfigError("at least one [devices.NAME] section is required")

    @property
    def n_devices(self) -> int:
        return sum(c.count for c in self.device_classes)

    def config_hash(self) -> str:
        return hashlib.sha256(self.source.encode()).hexdigest()

    def devices(self, seed: int) -> list[DeviceProfile]:
        """Expand the device classes, drawing from ``fleet_seed`` if set and the run seed otherwise."""
        rng = np.random.default_rng([self.fleet_seed if self.fleet_seed is not None else seed, 11])
        out = []
        for cls in self.device_classes:
            for _ in range(cls.count):
                a = rng.uniform(*cls.a)
                mu = rng.uniform(*cls.mu)
                sizes = rng.integers(cls.data_size[0], cls.data_size[1] + 1, size=len(self.jobs))
                out.append(DeviceProfile(len(out), float(a), float(mu), tuple(int(s) for s in sizes)))
        return out

    def sim_config(self, scheduler: str, seed: int, policies=None) -> SimConfig:
        if policies is None and self.settings.rlds.policy_file and scheduler in ("rlds", "meta-greedy"):
            policies = load_policies(self.settings.rlds.policy_file, self.n_devices)
        return SimConfig(
            devices=self.devices(seed),
            jobs=list(self.jobs),
            scheduler=scheduler,
            mode=self.mode,
            seed=seed,
            kappa=self.kappa,
            round_spread=self.round_spread,
            settings=self.settings,
            minifl=self.minifl,
            policies=policies,
        )

    def variants(self, axis: Optional[str] = None) -> dict[str, "ExperimentSpec"]:
        """Named copies of the spec along one ablation axis, including the unmodified base."""
        axis = axis or self.ablation
        if axis not in ABLATIONS:
            raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(ABLATIONS)}")
        if axis == "none":
            return {"base": self}
        if axis == "beta-zero":
            return {"base": self, "beta-zero": self._with_jobs(beta=0.0)}
        if axis == "alpha-zero":
            return {"base": self, "alpha-zero": self._with_jobs(alpha=0.0)}
        out = {}
        for kind in OMEGAS:
            settings = dataclasses.replace(self.settings, omega=kind)
            out[f"omega-{kind}"] = dataclasses.replace(self, settings=settings)
        return out

    def _with_jobs(self, **changes) -> "ExperimentSpec":
        return dataclasses.replace(self, jobs=[dataclasses.replace(j, **changes) for j in self.jobs])


# ---------------------------------------------------------------------------
# value parsers


def _float(section, key, text) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: malformed number {text!r}") from None


def _int(section, key, text) -> int:
    try:
        return int(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: malformed integer {text!r}") from None


def _bool(section, key, text) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")


def _list(text) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def _range(section, key, text, conv) -> tuple:
    parts = _list(text)
    if len(parts) not in (1, 2):
        raise ConfigError(f"[{section}] {key}: expected 'value' or 'low, high', got {text!r}")
    vals = [conv(section, key, p) for p in parts]
    lo, hi = vals[0], vals[-1]
    if lo > hi:
        raise ConfigError(f"[{section}] {key}: low {lo} exceeds high {hi}")
    return lo, hi


def _optional(conv):
    def parse(section, key, text):
        if text.strip().lower() in ("", "none"):
            return None
        return conv(section, key, text)

    return parse


def _by_type(section, key, text, default):
    """Parse ``text`` to the type of a dataclass default."""
    if isinstance(default, bool):
        return _bool(section, key, text)
    if isinstance(default, int):
        return _int(section, key, text)
    if isinstance(default, float):
        return _float(section, key, text)
    if default is None or isinstance(default, str):
        return None if text.strip().lower() == "none" else text.strip()
    if isinstance(default, tuple):
        return tuple(_list(text))
    raise ConfigError(f"[{section}] {key}: unsupported setting")


def _fill(section: str, values: Mapping[str, str], obj, aliases=None):
    aliases = aliases or {}
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, text in values.items():
        name = aliases.get(key, key)
        if name not in names:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        changes[name] = _by_type(section, key, text, getattr(obj, name))
    return dataclasses.replace(obj, **changes)


# ---------------------------------------------------------------------------

_EXPERIMENT_KEYS = {
    "schedulers", "scheduler", "seeds", "seed", "mode", "ablation", "out_dir",
    "kappa", "round_spread", "fleet_seed",
}
_JOB_KEYS = {
    "fraction": _float, "local_epochs": _int, "batch_size": _int, "target_loss": _float,
    "alpha": _float, "beta": _float, "round_cap": _optional(_int), "target_accuracy": _optional(_float),
}
_JOB_REQUIRED = ("fraction", "gamma")
_DEVICE_KEYS = ("count", "a", "mu", "data_size")
_DEVICE_REQUIRED = ("count", "a", "mu")


def apply_env(parser: configparser.ConfigParser, environ: Mapping[str, str]) -> None:
    """Fold FEDSCHED_* variables into the parsed file.

    ``FEDSCHED_SEED``, ``FEDSCHED_MODE`` and ``FEDSCHED_OUT_DIR`` set experiment
    keys; ``FEDSCHED_<SECTION>__<KEY>`` sets any key, with dots in section names
    written as underscores (``FEDSCHED_JOB_0__BETA``).
    """
    sections = {s.replace(".", "_").upper(): s for s in parser.sections()}
    for var in sorted(environ):
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):]
        if "__" in rest:
            sec_name, key = rest.split("__", 1)
            section = sections.get(sec_name.upper(), sec_name.lower())
        else:
            section, key = "experiment", rest
            if key.lower() == "seed":
                key = "seeds"
        if not parser.has_section(section):
            parser.add_section(section)
            sections[section.replace(".", "_").upper()] = section
        parser.set(section, key.lower(), environ[var])


def parse_config_text(text: str, environ: Optional[Mapping[str, str]] = None) -> ExperimentSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    apply_env(parser, os.environ if environ is None else environ)

    exp = dict(parser["experiment"]) if parser.has_section("experiment") else {}
    for key in exp:
        if key not in _EXPERIMENT_KEYS:
            raise ConfigError(f"[experiment] unknown key {key!r}")

    settings = SchedulerSettings()
    jobs, classes, minifl = {}, [], {}
    minifl_names = {f.name for f in dataclasses.fields(MiniFLJob)}
    for name in parser.sections():
        values = dict(parser[name])
        if name == "experiment":
            continue
        if name.startswith("job."):
            idx = _int(name, "section index", name[4:])
            for key in _JOB_REQUIRED:
                if key not in values:
                    raise ConfigError(f"[{name}] missing required key {key!r}")
            kwargs = {}
            fl = {}
            for key, val in values.items():
                if key == "gamma":
                    g = [_float(name, key, p) for p in _list(val)]
                    if len(g) != 3:
                        raise ConfigError(f"[{name}] gamma: expected three numbers, got {val!r}")
                    kwargs["gamma"] = tuple(g)
                elif key in _JOB_KEYS:
                    kwargs[key] = _JOB_KEYS[key](name, key, val)
                elif key in minifl_names:
                    fl[key] = val
                else:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
            frac = kwargs["fraction"]
            if not 0 < frac <= 1:
                raise ConfigError(f"[{name}] fraction must be in (0, 1], got {frac}")
            try:
                jobs[idx] = JobSpec(idx, **kwargs)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from None
            if fl:
                minifl[idx] = _fill(name, fl, MiniFLJob())
        elif name.startswith("devices."):
            for key in values:
                if key not in _DEVICE_KEYS:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
            for key in _DEVICE_REQUIRED:
                if key not in values:
                    raise ConfigError(f"[{name}] missing required key {key!r}")
            cls = DeviceClass(
                name=name[8:],
                count=_int(name, "count", values["count"]),
                a=_range(name, "a", values["a"], _float),
                mu=_range(name, "mu", values["mu"], _float),
                data_size=_range(name, "data_size", values.get("data_size", "100"), _int),
            )
            if cls.count < 0 or cls.a[0] <= 0 or cls.mu[0] <= 0 or cls.data_size[0] < 0:
                raise ConfigError(f"[{name}] count, a, mu and data_size must be positive")
            classes.append(cls)
        elif name == "bods":
            settings.bods = _fill(name, values, BodsSettings())
        elif name == "rlds":
            settings.rlds = _fill(name, values, RldsSettings())
        elif name == "genetic":
            settings.genetic = _fill(name, values, GeneticSettings())
        elif name == "fedcs":
            for key, val in values.items():
                if key == "deadline":
                    settings.fedcs_deadline = _optional(_float)(name, key, val)
                elif key == "deadline_factor":
                    settings.fedcs_deadline_factor = _float(name, key, val)
                else:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
        elif name == "meta_greedy":
            for key, val in values.items():
                if key == "constituents":
                    settings.meta_constituents = tuple(_list(val))
                elif key == "omega":
                    if val.strip() not in OMEGAS:
                        raise ConfigError(f"[{name}] omega must be one of {', '.join(OMEGAS)}")
                    settings.omega = val.strip()
                else:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
        else:
            raise ConfigError(f"unknown section [{name}]")

    if sorted(jobs) != list(range(len(jobs))):
        raise ConfigError(f"job sections must be numbered 0..M-1, got {sorted(jobs)}")

    schedulers = _list(exp.get("schedulers", exp.get("scheduler", "random")))
    seeds = [_int("experiment", "seeds", s) for s in _list(exp.get("seeds", exp.get("seed", "0")))]
    fleet_seed = exp.get("fleet_seed")
    return ExperimentSpec(
        jobs=[jobs[m] for m in range(len(jobs))],
        device_classes=classes,
        schedulers=schedulers,
        seeds=seeds,
        mode=exp.get("mode", "curve").strip(),
        ablation=exp.get("ablation", "none").strip(),
        out_dir=exp.get("out_dir", "results").strip(),
        kappa=_float("experiment", "kappa", exp.get("kappa", "1.0")),
        round_spread=_float("experiment", "round_spread", exp.get("round_spread", "0.3")),
        fleet_seed=None if fleet_seed is None else _int("experiment", "fleet_seed", fleet_seed),
        settings=settings,
        minifl=minifl,
        source=_canonical(parser),
    )


def _canonical(parser: configparser.ConfigParser) -> str:
    lines = []
    for name in sorted(parser.sections()):
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v.strip()}" for k, v in sorted(parser[name].items()))
    return "\n".join(lines) + "\n"


def parse_config(path, environ: Optional[Mapping[str, str]] = None) -> ExperimentSpec:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(), environ)
