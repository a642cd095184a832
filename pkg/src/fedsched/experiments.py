"""Run scheduler-by-seed experiment grids and write traces, summaries, charts and a manifest."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ExperimentSpec
from .simulator import SimResult, run

log = logging.getLogger(__name__)

TRACE_COLUMNS = (
    "round", "job", "clock", "wall_time", "time_cost", "fairness_cost", "total_cost",
    "loss", "accuracy", "selected_method", "plan", "beta_eff",
)
SUMMARY_COLUMNS = (
    "scheduler", "seed", "job", "rounds", "time_to_target", "rounds_to_target",
    "final_loss", "final_accuracy", "total_time", "total_cost",
)
UNREACHED = "unreached"


def _num(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def trace_rows(result: SimResult) -> list[list[str]]:
    rows = []
    for t in result.all_rounds:
        rows.append([
            str(t.round), str(t.job), _num(t.clock), _num(t.wall_time), _num(t.time_cost),
            _num(t.fairness_cost), _num(t.total_cost), _num(t.loss), _num(t.accuracy),
            t.selected_method, ";".join(str(d) for d in t.plan.devices), _num(t.beta_eff),
        ])
    return rows


def summary_rows(scheduler: str, seed: int, result: SimResult) -> list[list[str]]:
    total_time = _num(result.total_time)
    rows = []
    for m, s in sorted(result.summary.items()):
        rows.append([
            scheduler, str(seed), str(m), str(s.rounds),
            _num(s.time_to_target) if s.reached else UNREACHED,
            str(s.rounds_to_target) if s.reached else UNREACHED,
            _num(s.final_loss), _num(s.final_accuracy), total_time, _num(s.total_cost),
        ])
    return rows


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def trace_name(scheduler: str, seed: int) -> str:
    return f"trace_{scheduler}_seed{seed}.csv"


def _run_cell(args):
    spec, scheduler, seed = args
    return scheduler, seed, run(spec.sim_config(scheduler, seed))


def run_experiments(
    spec: ExperimentSpec,
    out_dir: Optional[str | Path] = None,
    schedulers: Optional[Sequence[str]] = None,
    seeds: Optional[Sequence[int]] = None,
    workers: int = 1,
) -> dict[tuple[str, int], SimResult]:
    """Run every (scheduler, seed) cell and write its artifacts under ``out_dir``.

    Writes one trace CSV per cell, ``summary.csv``, one ``loss_job<m>.svg`` per
    job (first seed, one line per scheduler) and ``manifest.json``.
    """
    out = Path(out_dir if out_dir is not None else spec.out_dir)
    schedulers = list(schedulers or spec.schedulers)
    seeds = list(seeds if seeds is not None else spec.seeds)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc

    cells = [(spec, s, seed) for s in schedulers for seed in seeds]
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_cell, cells))
    else:
        done = [_run_cell(c) for c in cells]

    results = {}
    summary = []
    for scheduler, seed, result in done:
        results[scheduler, seed] = result
        _write_csv(out / trace_name(scheduler, seed), TRACE_COLUMNS, trace_rows(result))
        summary.extend(summary_rows(scheduler, seed, result))
        log.info("%s seed %d: total time %.4g", scheduler, seed, result.total_time)
    _write_csv(out / "summary.csv", SUMMARY_COLUMNS, summary)
    write_charts(out, results, schedulers, seeds[0], len(spec.jobs))
    manifest = {
        "version": __version__,
        "config_hash": spec.config_hash(),
        "seeds": seeds,
        "schedulers": schedulers,
        "mode": spec.mode,
        "traces": [trace_name(s, seed) for s in schedulers for seed in seeds],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return results


def write_charts(out: Path, results, schedulers, seed: int, n_jobs: int) -> None:
    from .svg import line_chart

    for m in range(n_jobs):
        series = {}
        for s in schedulers:
            rows = results[s, seed].traces[m]
            series[s] = ([t.clock for t in rows], [t.loss for t in rows])
        svg = line_chart(series, title=f"job {m} loss, seed {seed}", xlabel="clock", ylabel="loss")
        (out / f"loss_job{m}.svg").write_text(svg)


def read_trace(path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
