"""Command-line entry point wiring every module into one binary.

Subcommands: train, decode, bench, sweep, synth, verify-span-math,
visualize.  Each accepts ``--config FILE`` holding a JSON object whose
keys mirror the subcommand's flags; precedence is defaults, then file,
then explicit flags.  The effective configuration is echoed to stdout as
one JSON line so runs are self-describing (prefixed with ``# `` when
stdout carries CSV data).  Exit codes: 0 on success, 1 on a validation
problem naming the offending flag or field, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Callable, Optional

import numpy as np

from .bench import BenchConfig, export_trace_heatmap, run_bench, sweep_quality_latency
from .decoder import DecodeConfig, decode, write_trace_csv
from .grids import write_grid
from .hybrid import HybridBatch, hybrid_train_step
from .model import (
    ModelConfig,
    ToyModel,
    TrainBatch,
    load_checkpoint,
    save_checkpoint,
    train_step_ar,
    train_step_nar,
)
from .schedules import ScheduleParams
from .spans import enumerate_mask_rate, expected_mask_rate
from .synth import generate, make_default_task

SPAN_TABLE_COLUMNS = ("T", "l", "u", "expected", "enumerated", "abs_err")
SYNTH_LABELS_NAME = "labels.csv"


# ----------------------------------------------------------------------
# flag-value parsing


def _int_list(value) -> tuple[int, ...]:
    """Accept \"20,10,10,10\" or a JSON list of integers."""
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    parts = [p for p in str(value).split(",") if p.strip() != ""]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _schedule_list(value) -> tuple[tuple[int, ...], ...]:
    """Accept \"20,10;8,4\" or a JSON list of integer lists."""
    if isinstance(value, (list, tuple)):
        return tuple(_int_list(v) for v in value)
    groups = [g for g in str(value).split(";") if g.strip() != ""]
    if not groups:
        raise ValueError("expected semicolon-separated schedules")
    return tuple(_int_list(g) for g in groups)


def _float_pair(value) -> tuple[float, float]:
    """Accept \"10,1\" or a JSON pair of numbers."""
    if isinstance(value, (list, tuple)):
        parts = list(value)
    else:
        parts = [p for p in str(value).split(",") if p.strip() != ""]
    if len(parts) != 2:
        raise ValueError(f"expected two comma-separated numbers, got {value!r}")
    return float(parts[0]), float(parts[1])


# ----------------------------------------------------------------------
# config plumbing


def _merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """Overlay JSON config-file values and explicit flags onto defaults."""
    effective = dict(defaults)
    path = getattr(args, "config", None)
    if path is not None:
        if not os.path.exists(path):
            raise ValueError(f"--config: no file at {path}")
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"--config: not valid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ValueError("--config: file must hold a JSON object")
        for key, val in data.items():
            if key not in defaults:
                raise ValueError(f"--config: unknown key {key!r}")
            effective[key] = val
    for key in defaults:
        val = getattr(args, key.replace("-", "_"))
        if val is not None:
            effective[key] = val
    return effective


def _echo(effective: dict, command: str, *, csv_stdout: bool = False) -> None:
    payload = {"command": command, **effective}
    line = json.dumps(payload, sort_keys=True)
    print(f"# {line}" if csv_stdout else line)


def _load_model(path: Optional[str], flag: str) -> ToyModel:
    if path is None:
        raise ValueError(f"{flag} is required")
    if not os.path.isdir(path):
        raise ValueError(f"{flag}: no checkpoint directory at {path}")
    return load_checkpoint(path)


# ----------------------------------------------------------------------
# subcommand: train


_TRAIN_DEFAULTS = {
    "mode": "nar",
    "train_steps": 200,
    "batch": 48,
    "length": 64,
    "d_model": 64,
    "heads": 4,
    "layers": 2,
    "window": 5,
    "lr": 3e-4,
    "total_steps": 20,
    "span": 3,
    "seed": 0,
    "task_seed": 0,
    "log_every": 50,
    "out": None,
}


def _cmd_train(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _TRAIN_DEFAULTS)
    _echo(eff, "train")
    if eff["out"] is None:
        raise ValueError("--out is required")
    task = make_default_task(int(eff["task_seed"]), length=int(eff["length"]))
    mode = str(eff["mode"])
    window = eff["window"]
    config = ModelConfig(
        num_levels=task.num_levels,
        vocab=task.vocab,
        max_len=task.length,
        cond_count=task.cond_count,
        d_model=int(eff["d_model"]),
        n_heads=int(eff["heads"]),
        n_layers=int(eff["layers"]),
        window=None if window in (None, "none", "full") else int(window),
        mode="nar" if mode == "nar" else "fused",
        lr=float(eff["lr"]),
        seed=int(eff["seed"]),
    )
    model = ToyModel(config)
    rng = np.random.default_rng([int(eff["seed"]), task.num_levels + 1])
    batch_size = int(eff["batch"])
    steps = int(eff["train_steps"])
    for step in range(1, steps + 1):
        conds = rng.integers(0, task.cond_count, size=batch_size)
        grids = np.stack([generate(task, int(c), rng).cells for c in conds])
        if mode == "nar":
            loss = train_step_nar(
                model, TrainBatch(grids, conds), rng,
                total_steps=int(eff["total_steps"]), span_len=int(eff["span"]),
            )
        elif mode == "ar":
            loss = train_step_ar(model, TrainBatch(grids, conds), rng)
        else:
            batch = HybridBatch.sample(TrainBatch(grids, conds), rng)
            loss_ar, loss_nar = hybrid_train_step(
                model, batch, rng,
                total_steps=int(eff["total_steps"]), span_len=int(eff["span"]),
            )
            loss = sum(x for x in (loss_ar, loss_nar) if x is not None)
        if step % int(eff["log_every"]) == 0 or step == steps:
            print(f"step {step} loss {loss:.6f}")
    save_checkpoint(model, eff["out"])
    print(f"saved checkpoint to {eff['out']}")
    return 0


# ----------------------------------------------------------------------
# subcommand: decode (and visualize, which shares its surface)


_DECODE_DEFAULTS = {
    "ckpt": None,
    "cond": 0,
    "steps": "20,10,10,10",
    "span": 3,
    "topp": 0.9,
    "temp": 3.0,
    "cfg": "10,1",
    "rescorer": None,
    "w": 1.0,
    "seed": 0,
    "out": None,
    "trace": None,
}


def _decode_config(eff: dict, model: ToyModel) -> DecodeConfig:
    lambda0, lambda1 = _float_pair(eff["cfg"])
    schedule = ScheduleParams(
        lambda0=lambda0,
        lambda1=lambda1,
        tau0=float(eff["temp"]),
        top_p=float(eff["topp"]),
    )
    rescorer = None
    if eff["rescorer"] is not None:
        rescorer = _load_model(eff["rescorer"], "--rescorer")
        if rescorer.config.mode != model.config.mode:
            raise ValueError("--rescorer: checkpoint mode differs from the generator")
    steps = _int_list(eff["steps"])
    if len(steps) != model.config.num_levels:
        raise ValueError(
            f"--steps: {len(steps)} entries for a {model.config.num_levels}-level model"
        )
    return DecodeConfig(
        steps_per_level=steps,
        span_len=int(eff["span"]),
        schedule=schedule,
        rescorer_weight=float(eff["w"]),
        rescorer=rescorer,
        seed=int(eff["seed"]),
    )


def _cmd_decode(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _DECODE_DEFAULTS)
    _echo(eff, "decode")
    model = _load_model(eff["ckpt"], "--ckpt")
    config = _decode_config(eff, model)
    grid, trace, report = decode(model, int(eff["cond"]), config)
    print(
        f"decoded {grid.num_levels}x{grid.length} grid in "
        f"{report.model_forwards} model forwards"
    )
    if eff["out"] is not None:
        write_grid(grid, eff["out"])
        print(f"wrote grid to {eff['out']}")
    if eff["trace"] is not None:
        write_trace_csv(trace, eff["trace"])
        print(f"wrote trace to {eff['trace']}")
    return 0


def _cmd_visualize(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _DECODE_DEFAULTS)
    _echo(eff, "visualize")
    if eff["out"] is None:
        raise ValueError("--out is required")
    model = _load_model(eff["ckpt"], "--ckpt")
    config = _decode_config(eff, model)
    _, trace, _ = decode(model, int(eff["cond"]), config)
    export_trace_heatmap(trace, eff["out"])
    print(f"wrote heatmap to {eff['out']}")
    if eff["trace"] is not None:
        write_trace_csv(trace, eff["trace"])
        print(f"wrote trace to {eff['trace']}")
    return 0


# ----------------------------------------------------------------------
# subcommand: bench


_BENCH_DEFAULTS = {
    "ckpt": None,
    "batches": "1,4",
    "lengths": "64",
    "schedules": "20,10,10,10",
    "ar": False,
    "switches": "",
    "reps": 3,
    "warmup": 1,
    "cond": 0,
    "steps": "20,10,10,10",
    "span": 3,
    "topp": 0.9,
    "temp": 3.0,
    "cfg": "10,1",
    "out": None,
}


def _cmd_bench(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _BENCH_DEFAULTS)
    _echo(eff, "bench")
    if eff["out"] is None:
        raise ValueError("--out is required")
    model = _load_model(eff["ckpt"], "--ckpt")
    schedules = _schedule_list(eff["schedules"])
    steps = eff["steps"]
    if steps == _BENCH_DEFAULTS["steps"] and schedules:
        steps = ",".join(str(s) for s in schedules[0])
    decode_cfg = _decode_config({**eff, "steps": steps, "rescorer": None, "w": 1.0, "seed": 0}, model)
    switches = _int_list(eff["switches"]) if str(eff["switches"]).strip() else ()
    config = BenchConfig(
        batch_sizes=_int_list(eff["batches"]),
        lengths=_int_list(eff["lengths"]),
        nar_schedules=schedules,
        include_ar=bool(eff["ar"]),
        hybrid_switches=switches,
        repetitions=int(eff["reps"]),
        warmup=int(eff["warmup"]),
        cond=int(eff["cond"]),
        decode=decode_cfg,
        out_path=eff["out"],
    )
    rows = run_bench(model, config)
    print(f"wrote {len(rows)} rows to {eff['out']}")
    return 0


# ----------------------------------------------------------------------
# subcommand: sweep


_SWEEP_DEFAULTS = {
    "ckpt": None,
    "schedules": "20,10,10,10",
    "switches": "",
    "samples": 8,
    "task_seed": 0,
    "length": 64,
    "steps": "20,10,10,10",
    "span": 3,
    "topp": 0.9,
    "temp": 3.0,
    "cfg": "10,1",
    "seed": 0,
    "out": None,
}


def _cmd_sweep(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _SWEEP_DEFAULTS)
    _echo(eff, "sweep")
    if eff["out"] is None:
        raise ValueError("--out is required")
    model = _load_model(eff["ckpt"], "--ckpt")
    task = make_default_task(int(eff["task_seed"]), length=int(eff["length"]))
    schedules = _schedule_list(eff["schedules"])
    steps = eff["steps"]
    if steps == _SWEEP_DEFAULTS["steps"] and schedules:
        steps = ",".join(str(s) for s in schedules[0])
    decode_cfg = _decode_config({**eff, "steps": steps, "rescorer": None, "w": 1.0}, model)
    switches = _int_list(eff["switches"]) if str(eff["switches"]).strip() else ()
    rows = sweep_quality_latency(
        model,
        task,
        schedules,
        switches,
        samples=int(eff["samples"]),
        decode_config=decode_cfg,
        out_path=eff["out"],
    )
    print(f"wrote {len(rows)} rows to {eff['out']}")
    return 0


# ----------------------------------------------------------------------
# subcommand: synth


_SYNTH_DEFAULTS = {
    "out": None,
    "count": None,
    "length": 64,
    "seed": 0,
    "task_seed": 0,
}


def _cmd_synth(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _SYNTH_DEFAULTS)
    _echo(eff, "synth")
    if eff["out"] is None:
        raise ValueError("--out is required")
    if eff["count"] is None:
        raise ValueError("--count is required")
    count = int(eff["count"])
    if count < 1:
        raise ValueError(f"--count must be >= 1, got {count}")
    task = make_default_task(int(eff["task_seed"]), length=int(eff["length"]))
    os.makedirs(eff["out"], exist_ok=True)
    label_rows = []
    width = max(5, len(str(count - 1)))
    for item in range(count):
        cond = item % task.cond_count
        rng = np.random.default_rng([int(eff["seed"]), item])
        grid = generate(task, cond, rng)
        name = f"grid_{item:0{width}d}.txt"
        write_grid(grid, os.path.join(eff["out"], name))
        label_rows.append({"file": name, "cond": cond})
    labels_path = os.path.join(eff["out"], SYNTH_LABELS_NAME)
    with open(labels_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["file", "cond"])
        writer.writeheader()
        writer.writerows(label_rows)
    print(f"wrote {count} grids and {SYNTH_LABELS_NAME} to {eff['out']}")
    return 0


# ----------------------------------------------------------------------
# subcommand: verify-span-math


_VERIFY_DEFAULTS = {"tmax": 12, "lmax": 6}


def _cmd_verify_span_math(args: argparse.Namespace) -> int:
    eff = _merge_config(args, _VERIFY_DEFAULTS)
    _echo(eff, "verify-span-math", csv_stdout=True)
    tmax, lmax = int(eff["tmax"]), int(eff["lmax"])
    if tmax < 1 or lmax < 1:
        raise ValueError(f"--tmax and --lmax must be >= 1, got {tmax}, {lmax}")
    writer = csv.writer(sys.stdout)
    writer.writerow(SPAN_TABLE_COLUMNS)
    worst = 0.0
    for length in range(1, tmax + 1):
        for span in range(1, min(lmax, length) + 1):
            for num in range(0, length + 1):
                expected = expected_mask_rate(length, span, num)
                enumerated = enumerate_mask_rate(length, span, num)
                err = abs(expected - enumerated)
                worst = max(worst, err)
                writer.writerow([length, span, num, repr(expected), repr(enumerated), repr(err)])
    if worst > 1e-12:
        print(f"error: formula and oracle disagree by {worst}", file=sys.stderr)
        return 2
    return 0


# ----------------------------------------------------------------------
# parser assembly


def _add_option(parser: argparse.ArgumentParser, name: str, **kw) -> None:
    parser.add_argument(name, default=None, **kw)


def _add_decode_flags(sub: argparse.ArgumentParser) -> None:
    _add_option(sub, "--ckpt", help="checkpoint directory of the generator")
    _add_option(sub, "--cond", type=int, help="conditioning label")
    _add_option(sub, "--steps", help="per-level iteration budgets, e.g. 20,10,10,10")
    _add_option(sub, "--span", type=int, help="span length in time steps")
    _add_option(sub, "--topp", type=float, help="nucleus sampling mass")
    _add_option(sub, "--temp", type=float, help="initial sampling temperature")
    _add_option(sub, "--cfg", help="guidance coefficients lambda0,lambda1")
    _add_option(sub, "--rescorer", help="checkpoint directory of a rescoring model")
    _add_option(sub, "--w", type=float, help="rescorer fusion weight in [0, 1]")
    _add_option(sub, "--seed", type=int, help="random seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="magnet",
        description="Masked multi-level token-grid generation: train, decode, measure.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a model on the built-in synthetic task")
    _add_option(train, "--mode", choices=["nar", "ar", "hybrid"], help="training objective")
    _add_option(train, "--train-steps", type=int, help="number of optimizer steps")
    _add_option(train, "--batch", type=int, help="examples per step")
    _add_option(train, "--length", type=int, help="grid length T")
    _add_option(train, "--d-model", type=int, help="model width")
    _add_option(train, "--heads", type=int, help="attention heads")
    _add_option(train, "--layers", type=int, help="transformer layers")
    _add_option(train, "--window", help="attention half-width for levels > 1, or 'full'")
    _add_option(train, "--lr", type=float, help="learning rate")
    _add_option(train, "--total-steps", type=int, help="decode schedule length trained against")
    _add_option(train, "--span", type=int, help="span length in time steps")
    _add_option(train, "--seed", type=int, help="random seed")
    _add_option(train, "--task-seed", type=int, help="seed fixing the synthetic task")
    _add_option(train, "--log-every", type=int, help="steps between loss lines")
    _add_option(train, "--out", help="checkpoint directory to write")
    _add_option(train, "--config", help="JSON config file")
    train.set_defaults(func=_cmd_train)

    dec = sub.add_parser("decode", help="generate one grid from a checkpoint")
    _add_decode_flags(dec)
    _add_option(dec, "--out", help="path for the generated grid (text format)")
    _add_option(dec, "--trace", help="path for the per-iteration trace CSV")
    _add_option(dec, "--config", help="JSON config file")
    dec.set_defaults(func=_cmd_decode)

    bench = sub.add_parser("bench", help="time decoding variants, write a CSV")
    _add_option(bench, "--ckpt", help="checkpoint directory of the generator")
    _add_option(bench, "--batches", help="batch sizes, e.g. 1,4")
    _add_option(bench, "--lengths", help="grid lengths, e.g. 32,64")
    _add_option(bench, "--schedules", help="semicolon-separated step budgets, e.g. 20,10;8,4")
    bench.add_argument("--ar", action="store_const", const=True, default=None,
                       help="include the autoregressive variant")
    _add_option(bench, "--switches", help="hybrid switch points, e.g. 8,16")
    _add_option(bench, "--reps", type=int, help="timed repetitions (>= 3)")
    _add_option(bench, "--warmup", type=int, help="discarded warmup runs (>= 1)")
    _add_option(bench, "--cond", type=int, help="conditioning label")
    _add_option(bench, "--steps", help="per-level budgets for ar/hybrid variants")
    _add_option(bench, "--span", type=int, help="span length in time steps")
    _add_option(bench, "--topp", type=float, help="nucleus sampling mass")
    _add_option(bench, "--temp", type=float, help="initial sampling temperature")
    _add_option(bench, "--cfg", help="guidance coefficients lambda0,lambda1")
    _add_option(bench, "--out", help="CSV output path")
    _add_option(bench, "--config", help="JSON config file")
    bench.set_defaults(func=_cmd_bench)

    sweep = sub.add_parser("sweep", help="trade quality against step count, write a CSV")
    _add_option(sweep, "--ckpt", help="checkpoint directory of the generator")
    _add_option(sweep, "--schedules", help="semicolon-separated step budgets")
    _add_option(sweep, "--switches", help="hybrid switch points, e.g. 8,16")
    _add_option(sweep, "--samples", type=int, help="grids decoded per configuration")
    _add_option(sweep, "--task-seed", type=int, help="seed fixing the synthetic task")
    _add_option(sweep, "--length", type=int, help="task grid length")
    _add_option(sweep, "--steps", help="per-level budgets for hybrid variants")
    _add_option(sweep, "--span", type=int, help="span length in time steps")
    _add_option(sweep, "--topp", type=float, help="nucleus sampling mass")
    _add_option(sweep, "--temp", type=float, help="initial sampling temperature")
    _add_option(sweep, "--cfg", help="guidance coefficients lambda0,lambda1")
    _add_option(sweep, "--seed", type=int, help="random seed")
    _add_option(sweep, "--out", help="CSV output path")
    _add_option(sweep, "--config", help="JSON config file")
    sweep.set_defaults(func=_cmd_sweep)

    synth = sub.add_parser("synth", help="emit synthetic grids plus a labels CSV")
    _add_option(synth, "--out", help="output directory")
    _add_option(synth, "--count", type=int, help="number of grids")
    _add_option(synth, "--length", type=int, help="grid length T")
    _add_option(synth, "--seed", type=int, help="random seed")
    _add_option(synth, "--task-seed", type=int, help="seed fixing the synthetic task")
    _add_option(synth, "--config", help="JSON config file")
    synth.set_defaults(func=_cmd_synth)

    verify = sub.add_parser(
        "verify-span-math", help="print the mask-rate formula vs brute-force oracle table"
    )
    _add_option(verify, "--tmax", type=int, help="largest grid length checked")
    _add_option(verify, "--lmax", type=int, help="largest span length checked")
    _add_option(verify, "--config", help="JSON config file")
    verify.set_defaults(func=_cmd_verify_span_math)

    vis = sub.add_parser("visualize", help="decode and render the re-masking heatmap as PGM")
    _add_decode_flags(vis)
    _add_option(vis, "--out", help="PGM output path")
    _add_option(vis, "--trace", help="optional per-iteration trace CSV")
    _add_option(vis, "--config", help="JSON config file")
    vis.set_defaults(func=_cmd_visualize)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    func: Callable[[argparse.Namespace], int] = args.func
    try:
        return func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
