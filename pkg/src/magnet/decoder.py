"""Iterative masked decoding over multi-level token grids.

The core loop re-masks the least confident spans of one level at a time,
anneals guidance and temperature along the cosine schedule, samples the
masked cells with nucleus sampling, and optionally fuses the sampler's
confidences with an external rescoring model.  Autoregressive and hybrid
(prompt-then-parallel) paths share the same sampling primitives.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attn import causal_mask, fused_hybrid_mask
from .grids import TokenGrid, delay_cells, new_fully_masked
from .model import ToyModel
from .schedules import TEMP_FLOOR, ScheduleParams, cfg_coeff, gamma, temperature
from .spans import SpanPartition, select_spans_to_mask, span_scores

__all__ = [
    "DecodeConfig",
    "DecodeTrace",
    "StepReport",
    "TraceStep",
    "cfg_combine",
    "decode",
    "decode_ar",
    "decode_hybrid",
    "decode_level",
    "nucleus_sample",
    "rescore_fuse",
    "write_trace_csv",
]

TRACE_CSV_COLUMNS = ("level", "iter", "gamma", "lambda", "tau", "masked_spans", "remasked_span_ids")


# ----------------------------------------------------------------------
# configuration and bookkeeping types


@dataclass(frozen=True)
class DecodeConfig:
    """Settings for one decode call.

    ``steps_per_level`` holds the iteration budget of each level, coarsest
    first.  ``rescorer`` is any frozen model exposing the same forward
    surface as the generator; its probabilities are blended with weight
    ``1 - rescorer_weight``.  ``ar_lambda`` and ``ar_temperature`` apply to
    the autoregressive path only, which uses a fixed guidance coefficient
    instead of the annealed one.  ``seed`` may be a single integer or a
    tuple of integers; every random stream in a decode is keyed on the full
    seed plus the level index, so a tuple like ``(run_seed, item_index)``
    gives batch items independent, reproducible streams.
    """

    steps_per_level: tuple[int, ...] = (20, 10, 10, 10)
    span_len: int = 3
    schedule: ScheduleParams = field(default_factory=ScheduleParams)
    rescorer_weight: float = 1.0
    rescorer: Optional[ToyModel] = None
    seed: int | tuple[int, ...] = 0
    ar_lambda: float = 3.0
    ar_temperature: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps_per_level", tuple(int(s) for s in self.steps_per_level))
        if len(self.steps_per_level) < 1 or any(s < 1 for s in self.steps_per_level):
            raise ValueError(f"steps_per_level must be positive integers, got {self.steps_per_level}")
        if isinstance(self.seed, (tuple, list)):
            if len(self.seed) < 1:
                raise ValueError("composite seed must have at least one part")
            object.__setattr__(self, "seed", tuple(int(s) for s in self.seed))
        else:
            object.__setattr__(self, "seed", int(self.seed))
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")
        if not 0.0 <= self.rescorer_weight <= 1.0:
            raise ValueError(f"rescorer_weight must lie in [0, 1], got {self.rescorer_weight}")
        if self.ar_lambda < 0:
            raise ValueError(f"ar_lambda must be >= 0, got {self.ar_lambda}")
        if self.ar_temperature < 0:
            raise ValueError(f"ar_temperature must be >= 0, got {self.ar_temperature}")


@dataclass
class TraceStep:
    """Everything observable about one re-masking iteration of one level.

    ``mask_row`` is the full-length mask after re-masking but before
    sampling (the heatmap row).  ``cells_after`` snapshots the level's row
    once this iteration's samples are placed, and ``span_scores`` holds the
    post-fusion confidence of every span (stale entries keep the value from
    the iteration that last sampled them).  Levels and span ids are
    0-based here; ``iteration`` is 1-based to match the schedule.
    """

    level: int
    iteration: int
    gamma: float
    lam: float
    tau: float
    masked_spans: int
    remasked_span_ids: np.ndarray
    mask_row: np.ndarray
    cells_after: np.ndarray
    span_scores: np.ndarray


@dataclass
class DecodeTrace:
    """Ordered iteration records for a full decode."""

    num_levels: int
    length: int
    steps: list[TraceStep] = field(default_factory=list)

    def level_steps(self, level: int) -> list[TraceStep]:
        return [s for s in self.steps if s.level == level]


@dataclass
class StepReport:
    """Forward-pass and wall-clock accounting for one decode call.

    Model forwards are split into autoregressive and parallel phases;
    rescorer passes are counted separately.  ``masked_span_counts`` lists
    the number of spans re-masked at each iteration, in execution order.
    """

    ar_forwards: int = 0
    nar_forwards: int = 0
    rescorer_forwards: int = 0
    wall_ms: float = 0.0
    masked_span_counts: list[int] = field(default_factory=list)

    @property
    def model_forwards(self) -> int:
        return self.ar_forwards + self.nar_forwards


# ----------------------------------------------------------------------
# sampling primitives


def cfg_combine(logits_cond: np.ndarray, logits_uncond: np.ndarray, lam: float) -> np.ndarray:
    """Classifier-free guidance in logit space: lam*cond + (1-lam)*uncond."""
    a = np.asarray(logits_cond)
    b = np.asarray(logits_uncond)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: {a.shape} vs {b.shape}")
    lam = float(lam)
    return lam * a + (1.0 - lam) * b


def nucleus_sample(
    logits: np.ndarray, top_p: float, temperature: float, rng: np.random.Generator
) -> tuple[int, float]:
    """Sample one token by top-p truncation at the given temperature.

    Returns the token id and its probability under the renormalized
    truncated distribution.  The kept set is the smallest prefix of the
    descending-probability ordering whose cumulative mass reaches top_p.
    """
    row = np.asarray(logits, dtype=np.float64)
    if row.ndim != 1 or row.size < 1:
        raise ValueError(f"logits must be a non-empty 1-D row, got shape {row.shape}")
    if not np.all(np.isfinite(row)):
        raise ValueError("logits must be finite")
    if not 0.0 < top_p <= 1.0:
        raise ValueError(f"top_p must lie in (0, 1], got {top_p}")
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    tau = max(float(temperature), TEMP_FLOOR)
    z = row / tau
    z -= z.max()
    probs = np.exp(z)
    probs /= probs.sum()
    order = np.argsort(-probs, kind="stable")
    csum = np.cumsum(probs[order])
    keep = min(int(np.searchsorted(csum, top_p, side="left")) + 1, probs.size)
    kept = order[:keep]
    kept_p = probs[kept]
    kept_p /= kept_p.sum()
    pick = int(np.searchsorted(np.cumsum(kept_p), rng.random(), side="right"))
    pick = min(pick, keep - 1)
    return int(kept[pick]), float(kept_p[pick])


def rescore_fuse(p_model: np.ndarray, p_rescorer: np.ndarray, w: float) -> np.ndarray:
    """Convex blend of sampler and rescorer probabilities: w*p_model + (1-w)*p_rescorer."""
    a = np.asarray(p_model, dtype=np.float64)
    b = np.asarray(p_rescorer, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"probability shapes differ: {a.shape} vs {b.shape}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    for name, arr in (("p_model", a), ("p_rescorer", b)):
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError(f"{name} values must lie in [0, 1]")
    return w * a + (1.0 - w) * b


# ----------------------------------------------------------------------
# forward adapter (per-level undelayed vs fused delayed trunk)


def _level_logits(
    model: ToyModel, cells: np.ndarray, level: int, cond: Optional[int], prompt_len: int
) -> np.ndarray:
    """One conditional forward pass; logits (T, vocab) for ``level``."""
    cfg = model.config
    t = cells.shape[1]
    if cfg.mode == "nar":
        return model.forward(cells, level, cond)
    delayed = delay_cells(cells, cfg.pad_id)
    mask = fused_hybrid_mask(t, cfg.num_levels, prompt_len, cfg.window)
    h = model.fused_forward(delayed, cond, mask)
    return model.fused_level_logits(h, level, t)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    return p / p.sum(axis=-1, keepdims=True)


# ----------------------------------------------------------------------
# the iterative per-level loop


def decode_level(
    model: ToyModel,
    grid: TokenGrid,
    level: int,
    cond: Optional[int],
    config: DecodeConfig,
    trace: DecodeTrace,
    *,
    rng: Optional[np.random.Generator] = None,
    region_start: int = 0,
    report: Optional[StepReport] = None,
) -> TokenGrid:
    """Fill level ``level`` of ``grid`` over times >= region_start.

    Iteration i re-masks the max(int(gamma_i * n_spans), 1) least confident
    spans that are not yet fixed, permanently fixes the rest, then samples
    every masked cell from guidance-combined logits at temperature tau(i).
    Confidences come from the sampler (optionally fused with a rescorer)
    and the loop leaves no masked cells behind.
    """
    cfg = model.config
    cells = grid.cells
    t = grid.length
    k = grid.num_levels
    if k != cfg.num_levels or t > cfg.max_len:
        raise ValueError(f"grid ({k}, {t}) does not fit model ({cfg.num_levels}, <= {cfg.max_len})")
    if not 0 <= level < k:
        raise ValueError(f"level {level} out of range [0, {k})")
    if len(config.steps_per_level) != k:
        raise ValueError(
            f"steps_per_level has {len(config.steps_per_level)} entries for {k} levels"
        )
    if not 0 <= region_start < t:
        raise ValueError(f"region_start {region_start} must lie in [0, {t})")
    mask_id = grid.mask_id
    if np.any(cells[:level] == mask_id):
        raise ValueError(f"levels below {level} must be fully decoded first")
    if np.any(cells[level, :region_start] == mask_id):
        raise ValueError("prompt cells of the target level must already be decoded")
    if not np.all(cells[level, region_start:] == mask_id):
        raise ValueError(f"level {level} must be fully masked over the decode region")

    if rng is None:
        rng = np.random.default_rng([*_seed_parts(config.seed), level])
    sched = config.schedule
    steps = config.steps_per_level[level]
    part = SpanPartition(t - region_start, config.span_len)
    u = part.n_spans
    elide_uncond = sched.lambda0 == 1.0 and sched.lambda1 == 1.0

    scores = np.zeros(u, dtype=np.float64)
    fixed = np.zeros(u, dtype=bool)
    for i in range(1, steps + 1):
        g = gamma(i, steps)
        lam = cfg_coeff(g, sched.lambda0, sched.lambda1)
        tau = temperature(i, steps, sched.tau0)
        n_mask = max(int(g * u), 1)
        sel = select_spans_to_mask(scores, fixed, n_mask)
        fixed = np.ones(u, dtype=bool)
        fixed[sel] = False

        region_row = part.rows_for(sel)
        mask_row = np.zeros(t, dtype=bool)
        mask_row[region_start:] = region_row
        cells[level, mask_row] = mask_id

        logits = _level_logits(model, cells, level, cond, region_start)
        if elide_uncond:
            forwards = 1
        else:
            uncond = _level_logits(model, cells, level, None, region_start)
            logits = cfg_combine(logits, uncond, lam)
            forwards = 2

        masked_t = np.flatnonzero(mask_row)
        p_model = np.empty(masked_t.size, dtype=np.float64)
        for pos, t_idx in enumerate(masked_t):
            tok, prob = nucleus_sample(logits[t_idx], sched.top_p, tau, rng)
            cells[level, t_idx] = tok
            p_model[pos] = prob

        if config.rescorer is not None:
            r_logits = _level_logits(config.rescorer, cells, level, cond, region_start)
            r_probs = _softmax_rows(r_logits[masked_t])
            p_resc = r_probs[np.arange(masked_t.size), cells[level, masked_t]]
            fused = rescore_fuse(p_model, p_resc, config.rescorer_weight)
            if report is not None:
                report.rescorer_forwards += 1
        else:
            fused = p_model

        region_probs = np.zeros(t - region_start, dtype=np.float64)
        region_probs[masked_t - region_start] = fused
        fresh = span_scores(region_probs, part)
        scores[sel] = fresh[sel]

        trace.steps.append(
            TraceStep(
                level=level,
                iteration=i,
                gamma=g,
                lam=lam,
                tau=tau,
                masked_spans=int(sel.size),
                remasked_span_ids=sel.copy(),
                mask_row=mask_row,
                cells_after=cells[level].copy(),
                span_scores=scores.copy(),
            )
        )
        if report is not None:
            report.nar_forwards += forwards
            report.masked_span_counts.append(int(sel.size))

    if np.any(cells[level, region_start:] == mask_id):
        raise RuntimeError(f"level {level} left masked cells behind")
    return grid


# ----------------------------------------------------------------------
# entry points


def _seed_parts(seed: int | tuple[int, ...]) -> list[int]:
    return list(seed) if isinstance(seed, tuple) else [seed]


def _check_config(model: ToyModel, config: DecodeConfig) -> None:
    if len(config.steps_per_level) != model.config.num_levels:
        raise ValueError(
            f"steps_per_level has {len(config.steps_per_level)} entries for "
            f"{model.config.num_levels} levels"
        )


def _check_length(model: ToyModel, length: Optional[int]) -> int:
    if length is None:
        return model.config.max_len
    if not 1 <= length <= model.config.max_len:
        raise ValueError(f"length must lie in [1, {model.config.max_len}], got {length}")
    return length


def decode(
    model: ToyModel,
    cond: Optional[int],
    config: DecodeConfig,
    *,
    length: Optional[int] = None,
) -> tuple[TokenGrid, DecodeTrace, StepReport]:
    """Generate a full grid level by level, coarsest first.

    ``length`` defaults to the model's maximum and may be any shorter
    duration; the iteration counts are length-independent.
    """
    _check_config(model, config)
    cfg = model.config
    t = _check_length(model, length)
    grid = new_fully_masked(cfg.num_levels, t, cfg.vocab)
    trace = DecodeTrace(cfg.num_levels, t)
    report = StepReport()
    start = time.perf_counter()
    for level in range(cfg.num_levels):
        decode_level(model, grid, level, cond, config, trace, report=report)
    report.wall_ms = (time.perf_counter() - start) * 1e3
    return grid, trace, report


def _ar_fill(
    model: ToyModel,
    cells: np.ndarray,
    cond: Optional[int],
    config: DecodeConfig,
    rng: np.random.Generator,
    n_cols: int,
    report: Optional[StepReport],
) -> None:
    """Sample delayed columns 0..n_cols-1 left to right, in place."""
    cfg = model.config
    k, t = cells.shape
    delayed = delay_cells(cells, cfg.pad_id)
    elide = config.ar_lambda == 1.0
    for col in range(n_cols):
        mask = causal_mask(col + 1)
        h_cond = model.fused_forward(delayed[:, :col], cond, mask)[col]
        h_uncond = None if elide else model.fused_forward(delayed[:, :col], None, mask)[col]
        if report is not None:
            report.ar_forwards += 1 if elide else 2
        lo = max(0, col - t + 1)
        hi = min(k - 1, col)
        for level in range(lo, hi + 1):
            logits = model.head_logits(h_cond, level)
            if not elide:
                logits = cfg_combine(logits, model.head_logits(h_uncond, level), config.ar_lambda)
            tok, _ = nucleus_sample(logits, config.schedule.top_p, config.ar_temperature, rng)
            cells[level, col - level] = tok
            delayed[level, col] = tok


def decode_ar(model: ToyModel, cond: Optional[int], length: int, config: DecodeConfig) -> TokenGrid:
    """Autoregressive decode over the delayed layout, one column per step."""
    cfg = model.config
    if cfg.mode != "fused":
        raise ValueError("autoregressive decoding needs a fused-mode model")
    if not 1 <= length <= cfg.max_len:
        raise ValueError(f"length must lie in [1, {cfg.max_len}], got {length}")
    cells = np.full((cfg.num_levels, length), cfg.mask_id, dtype=np.int64)
    rng = np.random.default_rng([*_seed_parts(config.seed), cfg.num_levels])
    _ar_fill(model, cells, cond, config, rng, length + cfg.num_levels - 1, None)
    return TokenGrid(cfg.vocab, cells)


def decode_hybrid(
    model: ToyModel,
    cond: Optional[int],
    t_switch: int,
    config: DecodeConfig,
    *,
    length: Optional[int] = None,
) -> tuple[TokenGrid, StepReport]:
    """Autoregressively decode a prompt, then finish the grid in parallel.

    Columns covering undelayed times below ``t_switch`` are sampled left to
    right and frozen; the staircase overhang those columns carry past the
    boundary is discarded so every level's parallel region starts exactly
    at ``t_switch``.
    """
    cfg = model.config
    if cfg.mode != "fused":
        raise ValueError("hybrid decoding needs a fused-mode model")
    _check_config(model, config)
    t = _check_length(model, length)
    if not 0 <= t_switch <= t:
        raise ValueError(f"t_switch must lie in [0, {t}], got {t_switch}")
    report = StepReport()
    start = time.perf_counter()
    grid = new_fully_masked(cfg.num_levels, t, cfg.vocab)
    cells = grid.cells
    if t_switch > 0:
        rng_ar = np.random.default_rng([*_seed_parts(config.seed), cfg.num_levels])
        n_cols = min(t_switch + cfg.num_levels - 1, t + cfg.num_levels - 1)
        _ar_fill(model, cells, cond, config, rng_ar, n_cols, report)
        cells[:, t_switch:] = cfg.mask_id
    if t_switch < t:
        trace = DecodeTrace(cfg.num_levels, t)
        for level in range(cfg.num_levels):
            decode_level(
                model, grid, level, cond, config, trace,
                region_start=t_switch, report=report,
            )
    report.wall_ms = (time.perf_counter() - start) * 1e3
    return grid, report


# ----------------------------------------------------------------------
# trace serialization


def write_trace_csv(trace: DecodeTrace, path: str) -> None:
    """Write one row per iteration; levels and iterations are 1-based here.

    Span ids stay 0-based partition indices, joined by semicolons.
    """
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_CSV_COLUMNS)
        for step in trace.steps:
            writer.writerow(
                [
                    step.level + 1,
                    step.iteration,
                    step.gamma,
                    step.lam,
                    step.tau,
                    step.masked_spans,
                    ";".join(str(int(j)) for j in step.remasked_span_ids),
                ]
            )
