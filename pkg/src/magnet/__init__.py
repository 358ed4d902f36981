"""Masked non-autoregressive generation over multi-stream token grids.

Desk-scale implementation of span-masked iterative decoding with classifier-
free guidance annealing, restricted-context attention for refinement levels,
an optional external rescorer, and a hybrid autoregressive/parallel mode,
trained and evaluated on a synthetic token task with known structure.
"""

from .bench import (
    BenchConfig,
    decode_batch,
    export_trace_heatmap,
    run_bench,
    sweep_quality_latency,
)
from .decoder import (
    DecodeConfig,
    DecodeTrace,
    StepReport,
    TraceStep,
    cfg_combine,
    decode,
    decode_ar,
    decode_hybrid,
    decode_level,
    nucleus_sample,
    rescore_fuse,
    write_trace_csv,
)
from .grids import (
    DelayLayout,
    TokenGrid,
    from_delayed,
    grid_from_text,
    grid_to_text,
    new_fully_masked,
    read_grid,
    to_delayed,
    write_grid,
)
from .hybrid import HybridBatch, hybrid_train_step
from .model import (
    ModelConfig,
    ToyModel,
    TrainBatch,
    grad_check,
    load_checkpoint,
    masked_ce_loss,
    save_checkpoint,
    train_step_ar,
    train_step_nar,
)
from .schedules import ScheduleParams, cfg_coeff, gamma, gamma_from_zero, temperature
from .spans import (
    SpanParams,
    SpanPartition,
    expected_mask_rate,
    enumerate_mask_rate,
    sample_training_spans,
    select_spans_to_mask,
    solve_num_spans,
    span_scores,
)
from .synth import (
    SynthTask,
    consistency_score,
    derive_level,
    entropy_rate,
    generate,
    level1_nll,
    make_default_task,
)

__all__ = [
    "BenchConfig",
    "decode_batch",
    "export_trace_heatmap",
    "run_bench",
    "sweep_quality_latency",
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
    "DelayLayout",
    "TokenGrid",
    "from_delayed",
    "grid_from_text",
    "grid_to_text",
    "new_fully_masked",
    "read_grid",
    "to_delayed",
    "write_grid",
    "HybridBatch",
    "hybrid_train_step",
    "ModelConfig",
    "ToyModel",
    "TrainBatch",
    "grad_check",
    "load_checkpoint",
    "masked_ce_loss",
    "save_checkpoint",
    "train_step_ar",
    "train_step_nar",
    "ScheduleParams",
    "cfg_coeff",
    "gamma",
    "gamma_from_zero",
    "temperature",
    "SpanParams",
    "SpanPartition",
    "expected_mask_rate",
    "enumerate_mask_rate",
    "sample_training_spans",
    "select_spans_to_mask",
    "solve_num_spans",
    "span_scores",
    "SynthTask",
    "consistency_score",
    "derive_level",
    "entropy_rate",
    "generate",
    "level1_nll",
    "make_default_task",
]

__version__ = "0.1.0"
