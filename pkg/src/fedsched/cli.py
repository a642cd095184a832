"""Command-line entry point."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ABLATIONS, ConfigError, parse_config
from .core import SchedulingError
from .experiments import run_experiments
from .schedulers.rlds import RldsScheduler, save_policies
from .simulator import SimulationError, Simulation, stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fedsched")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("config", help="experiment INI file")
    common.add_argument("--seed", type=int, help="run only this seed")
    common.add_argument("--out-dir", help="output directory (default: from config)")
    common.add_argument("--mode", choices=("curve", "minifl"), help="override the simulation mode")
    common.add_argument("--workers", type=int, default=1, help="parallel experiment cells")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fedsched", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="every scheduler on one seed")
    sub.add_parser("sweep", parents=[common], help="every scheduler on every seed")
    ab = sub.add_parser("ablate", parents=[common], help="sweep each variant along an ablation axis")
    ab.add_argument("--axis", required=True, choices=[a for a in ABLATIONS if a != "none"])
    pre = sub.add_parser("pretrain-rlds", parents=[common], help="pretrain RLDS policies on the cost model")
    pre.add_argument("--out", required=True, help="policy file to write")
    pre.add_argument("--rounds", type=int, help="pretraining rounds (default: rlds.pretrain_rounds or 100)")
    return parser


def _spec(args):
    spec = parse_config(args.config)
    if args.mode:
        spec = dataclasses.replace(spec, mode=args.mode)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=[args.seed])
    return spec


def _pretrain(spec, args) -> Path:
    seed = spec.seeds[0]
    rounds = args.rounds or spec.settings.rlds.pretrain_rounds or 100
    sim = Simulation(spec.sim_config("random", seed))
    sched = RldsScheduler(spec.settings.rlds, seed=seed)
    history = sched.pretrain(sim.jobs, sim.devices, rounds, stream(seed, "pretrain"), sim.time_scales)
    nets = {m: st.net for m, st in sched.states.items()}
    save_policies(args.out, nets, sim.K)
    if history:
        print(f"pretrained {len(nets)} policies for {rounds} rounds; "
              f"mean best cost {np.mean([min(h.costs) for h in history]):.4g}")
    return Path(args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        spec = _spec(args)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out_dir or spec.out_dir)
    try:
        if args.command == "run":
            run_experiments(spec, out, seeds=spec.seeds[:1], workers=args.workers)
        elif args.command == "sweep":
            run_experiments(spec, out, workers=args.workers)
        elif args.command == "ablate":
            for name, variant in spec.variants(args.axis).items():
                run_experiments(variant, out / name, workers=args.workers)
        else:
            _pretrain(spec, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, SchedulingError, OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if args.command != "pretrain-rlds":
        print(f"wrote results to {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
