"""Throughput and quality benchmarking across the decoding variants.

Step counts in every output row come straight from the decoder's
``StepReport`` accounting, never from timing, so the latency columns can
be compared against an exact forward-pass budget.  Batch items decode in
parallel worker threads over one shared frozen model; each item draws
from its own random stream keyed on (seed, item index), which keeps every
grid reproducible no matter how the threads interleave.  The environment
variable ``MAGNET_THREADS`` caps the worker count.
"""

from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .attn import mask_to_pgm
from .decoder import DecodeConfig, DecodeTrace, StepReport, decode, decode_hybrid
from .grids import TokenGrid
from .model import ToyModel
from .synth import SynthTask, consistency_score, level1_nll

BENCH_CSV_COLUMNS = ("variant", "batch", "T", "steps", "wall_ms_median", "throughput_items_per_s")
SWEEP_CSV_COLUMNS = ("variant", "steps", "wall_ms", "consistency_score", "level1_bigram_NLL")


# ----------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class BenchConfig:
    """Grid of benchmark settings for :func:`run_bench`.

    Each enabled variant is timed at every (batch size, length) pair.
    ``nar_schedules`` lists per-level iteration budgets for the fully
    parallel decoder; ``include_ar`` adds the one-column-per-step
    autoregressive variant; each entry of ``hybrid_switches`` adds a
    hybrid variant that hands over at that time step.  Warmup runs are
    discarded and the reported wall clock is the median over the timed
    repetitions.
    """

    batch_sizes: tuple[int, ...] = (1, 4)
    lengths: tuple[int, ...] = (64,)
    nar_schedules: tuple[tuple[int, ...], ...] = ((20, 10, 10, 10),)
    include_ar: bool = False
    hybrid_switches: tuple[int, ...] = ()
    repetitions: int = 3
    warmup: int = 1
    cond: Optional[int] = 0
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    out_path: Optional[str] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "lengths", tuple(int(t) for t in self.lengths))
        object.__setattr__(
            self, "nar_schedules", tuple(tuple(int(s) for s in sc) for sc in self.nar_schedules)
        )
        object.__setattr__(self, "hybrid_switches", tuple(int(t) for t in self.hybrid_switches))
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ValueError(f"batch_sizes must be positive, got {self.batch_sizes}")
        if not self.lengths or any(t < 1 for t in self.lengths):
            raise ValueError(f"lengths must be positive, got {self.lengths}")
        if self.repetitions < 3:
            raise ValueError(f"repetitions must be >= 3, got {self.repetitions}")
        if self.warmup < 1:
            raise ValueError(f"warmup must be >= 1, got {self.warmup}")
        if any(t < 0 for t in self.hybrid_switches):
            raise ValueError(f"hybrid_switches must be >= 0, got {self.hybrid_switches}")
        if not self.nar_schedules and not self.include_ar and not self.hybrid_switches:
            raise ValueError("no variants enabled: need a schedule, include_ar, or a switch point")


# ----------------------------------------------------------------------
# parallel batch decoding


def _worker_count(batch: int) -> int:
    raw = os.environ.get("MAGNET_THREADS")
    if raw is None:
        cap = os.cpu_count() or 1
    else:
        try:
            cap = int(raw)
        except ValueError:
            raise ValueError(f"MAGNET_THREADS must be an integer, got {raw!r}") from None
        if cap < 1:
            raise ValueError(f"MAGNET_THREADS must be >= 1, got {cap}")
    return max(1, min(batch, cap))


def _item_config(config: DecodeConfig, item: int) -> DecodeConfig:
    parts = config.seed if isinstance(config.seed, tuple) else (config.seed,)
    return replace(config, seed=(*parts, item))


def decode_batch(
    model: ToyModel,
    cond: Optional[int],
    config: DecodeConfig,
    batch_size: int,
    *,
    length: Optional[int] = None,
    t_switch: Optional[int] = None,
) -> tuple[list[TokenGrid], list[StepReport], float]:
    """Decode ``batch_size`` grids concurrently over one frozen model.

    Item ``j`` extends the configured seed with ``j``, so results are
    independent of thread scheduling and of the worker cap.  With
    ``t_switch`` absent every item runs the fully parallel decoder;
    otherwise the hybrid path (``t_switch == length`` is purely
    autoregressive).  Returns the grids, their per-item step reports, and
    the wall-clock milliseconds for the whole batch.
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")

    def _one(item: int) -> tuple[TokenGrid, StepReport]:
        cfg = _item_config(config, item)
        if t_switch is None:
            grid, _, report = decode(model, cond, cfg, length=length)
        else:
            grid, report = decode_hybrid(model, cond, t_switch, cfg, length=length)
        return grid, report

    with ThreadPoolExecutor(max_workers=_worker_count(batch_size)) as pool:
        start = time.perf_counter()
        futures = [pool.submit(_one, item) for item in range(batch_size)]
        results = [f.result() for f in futures]
        wall_ms = (time.perf_counter() - start) * 1e3
    grids = [grid for grid, _ in results]
    reports = [report for _, report in results]
    return grids, reports, wall_ms


# ----------------------------------------------------------------------
# latency benchmark


def _schedule_label(steps: tuple[int, ...]) -> str:
    return "nar(" + "-".join(str(s) for s in steps) + ")"


def _bench_variants(config: BenchConfig) -> list[tuple[str, DecodeConfig, Optional[int]]]:
    """Expand the config into (label, decode config, t_switch) triples.

    A ``t_switch`` of None selects the fully parallel path and the string
    sentinel "length" is resolved per benchmark length, so the
    autoregressive variant adapts to each T.
    """
    variants: list[tuple[str, DecodeConfig, Optional[int]]] = []
    for sched in config.nar_schedules:
        variants.append((_schedule_label(sched), replace(config.decode, steps_per_level=sched), None))
    if config.include_ar:
        variants.append(("ar", config.decode, "length"))
    for t_switch in config.hybrid_switches:
        variants.append((f"hybrid({t_switch})", config.decode, t_switch))
    return variants


def run_bench(model: ToyModel, config: BenchConfig) -> list[dict]:
    """Time every enabled variant at every (batch, length) pair.

    Returns one row per combination with the exact forward-pass count and
    the median wall clock over the timed repetitions; warmup runs are
    discarded.  When the config names an output path the rows are also
    written there as CSV.
    """
    max_len = model.config.max_len
    for t in config.lengths:
        if t > max_len:
            raise ValueError(f"length {t} exceeds the model maximum {max_len}")
    for t_switch in config.hybrid_switches:
        if t_switch > min(config.lengths):
            raise ValueError(
                f"hybrid switch {t_switch} exceeds the shortest benchmark length "
                f"{min(config.lengths)}"
            )
    if (config.include_ar or config.hybrid_switches) and model.config.mode != "fused":
        raise ValueError("autoregressive and hybrid variants need a fused-mode model")

    rows: list[dict] = []
    for label, dc, switch in _bench_variants(config):
        for batch in config.batch_sizes:
            for length in config.lengths:
                t_switch = length if switch == "length" else switch
                walls: list[float] = []
                reports: list[StepReport] = []
                for rep in range(config.warmup + config.repetitions):
                    _, reports, wall = decode_batch(
                        model, config.cond, dc, batch, length=length, t_switch=t_switch
                    )
                    if rep >= config.warmup:
                        walls.append(wall)
                counts = {r.model_forwards for r in reports}
                if len(counts) != 1:
                    raise RuntimeError(f"items of one batch disagree on step counts: {counts}")
                median = statistics.median(walls)
                rows.append(
                    {
                        "variant": label,
                        "batch": batch,
                        "T": length,
                        "steps": counts.pop(),
                        "wall_ms_median": median,
                        "throughput_items_per_s": batch / max(median / 1e3, 1e-9),
                    }
                )
    if config.out_path is not None:
        _write_csv(rows, BENCH_CSV_COLUMNS, config.out_path)
    return rows


# ----------------------------------------------------------------------
# quality/latency sweep


def sweep_quality_latency(
    model: ToyModel,
    task: SynthTask,
    schedules: tuple[tuple[int, ...], ...],
    t_switches: tuple[int, ...] = (),
    *,
    samples: int = 8,
    decode_config: Optional[DecodeConfig] = None,
    out_path: Optional[str] = None,
) -> list[dict]:
    """Trade quality against step count across schedules and switch points.

    Each configuration decodes ``samples`` grids (conditions cycling
    through the task's label set, one random stream per sample) and
    reports the mean self-consistency, the mean finest-level bigram NLL
    under the task's chains, and the median per-grid wall clock.
    """
    if samples < 1:
        raise ValueError(f"samples must be >= 1, got {samples}")
    if not schedules and not t_switches:
        raise ValueError("nothing to sweep: need at least one schedule or switch point")
    cfg = model.config
    if task.num_levels != cfg.num_levels or task.vocab != cfg.vocab:
        raise ValueError(
            f"task geometry ({task.num_levels}, {task.vocab}) does not match "
            f"model ({cfg.num_levels}, {cfg.vocab})"
        )
    if task.length > cfg.max_len:
        raise ValueError(f"task length {task.length} exceeds the model maximum {cfg.max_len}")
    if t_switches and cfg.mode != "fused":
        raise ValueError("hybrid sweep points need a fused-mode model")
    for t_switch in t_switches:
        if not 0 <= t_switch <= task.length:
            raise ValueError(f"t_switch {t_switch} must lie in [0, {task.length}]")
    base = decode_config if decode_config is not None else DecodeConfig()

    configs: list[tuple[str, DecodeConfig, Optional[int]]] = []
    for sched in schedules:
        configs.append((_schedule_label(tuple(sched)), replace(base, steps_per_level=sched), None))
    for t_switch in t_switches:
        configs.append((f"hybrid({t_switch})", base, t_switch))

    rows: list[dict] = []
    for label, dc, t_switch in configs:
        walls: list[float] = []
        scores: list[float] = []
        nlls: list[float] = []
        steps: set[int] = set()
        for item in range(samples):
            cond = item % task.cond_count
            item_cfg = _item_config(dc, item)
            if t_switch is None:
                grid, _, report = decode(model, cond, item_cfg, length=task.length)
            else:
                grid, report = decode_hybrid(model, cond, t_switch, item_cfg, length=task.length)
            walls.append(report.wall_ms)
            scores.append(consistency_score(grid, task))
            nlls.append(level1_nll(grid, task, cond))
            steps.add(report.model_forwards)
        if len(steps) != 1:
            raise RuntimeError(f"samples of one configuration disagree on step counts: {steps}")
        rows.append(
            {
                "variant": label,
                "steps": steps.pop(),
                "wall_ms": statistics.median(walls),
                "consistency_score": float(np.mean(scores)),
                "level1_bigram_NLL": float(np.mean(nlls)),
            }
        )
    if out_path is not None:
        _write_csv(rows, SWEEP_CSV_COLUMNS, out_path)
    return rows


# ----------------------------------------------------------------------
# trace rendering


def export_trace_heatmap(trace: DecodeTrace, path: str) -> None:
    """Render a decode trace as a PGM image, one row per iteration.

    Rows stack every traced level in execution order and columns are time
    steps; a dark pixel marks a cell that was masked going into that
    iteration, before its samples were placed.  The first row of each
    level's block is therefore fully dark, and a single-iteration level
    contributes one all-dark row.  Output bytes are a pure function of
    the trace.
    """
    if not trace.steps:
        raise ValueError("trace has no iterations to render")
    rows = np.stack([step.mask_row for step in trace.steps])
    mask_to_pgm(rows, path)


# ----------------------------------------------------------------------
# CSV output


def _write_csv(rows: list[dict], columns: tuple[str, ...], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)
