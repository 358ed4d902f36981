"""
Latency and quality measurement
===============================

The bench harness times decoding variants over batches of parallel
worker threads (one frozen model, one random stream per item) and
reports exact step counts next to median wall clocks.  The sweep trades
step budget against the synthetic task's quality metrics.
"""

import numpy as np

from magnet.bench import BenchConfig, run_bench, sweep_quality_latency
from magnet.decoder import DecodeConfig
from magnet.model import ModelConfig, ToyModel, TrainBatch, train_step_nar
from magnet.schedules import ScheduleParams
from magnet.synth import generate, make_default_task

task = make_default_task(length=32)
model = ToyModel(
    ModelConfig(
        num_levels=4, vocab=32, max_len=32, cond_count=4,
        d_model=32, n_heads=4, n_layers=1, window=5, mode="nar", seed=5,
    )
)

# A short warm-up training run so the sweep has signal to rank.
rng = np.random.default_rng(1)
for _ in range(400):
    conds = rng.integers(0, task.cond_count, size=16)
    grids = np.stack([generate(task, int(c), rng).cells for c in conds])
    train_step_nar(model, TrainBatch(grids, conds), rng)

# Throughput rows: smaller step budgets should never be slower.  Decoding
# uses mild guidance; toy-scale heads are too close for the 10x default.
base = DecodeConfig(
    steps_per_level=(20, 10, 10, 10),
    schedule=ScheduleParams(lambda0=3.0, lambda1=1.0, tau0=0.5),
)
rows = run_bench(
    model,
    BenchConfig(
        batch_sizes=(1, 4),
        lengths=(32,),
        nar_schedules=((20, 10, 10, 10), (8, 4, 4, 4)),
        decode=base,
        repetitions=3,
        warmup=1,
    ),
)
print(f"{'variant':<18} {'batch':<6} {'steps':<6} {'median ms':<10} items/s")
for row in rows:
    print(f"{row['variant']:<18} {row['batch']:<6} {row['steps']:<6} "
          f"{row['wall_ms_median']:<10.1f} {row['throughput_items_per_s']:.2f}")

# Quality versus step count on the synthetic task.
sweep = sweep_quality_latency(
    model, task,
    schedules=((20, 10, 10, 10), (8, 4, 4, 4), (2, 1, 1, 1)),
    samples=4,
    decode_config=base,
)
print(f"\n{'variant':<18} {'steps':<6} {'consistency':<12} level-1 NLL")
for row in sweep:
    print(f"{row['variant']:<18} {row['steps']:<6} "
          f"{row['consistency_score']:<12.3f} {row['level1_bigram_NLL']:.3f}")
