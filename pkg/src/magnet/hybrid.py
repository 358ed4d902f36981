"""Joint autoregressive and masked-prediction training.

Each example gets a switch time: positions before it form a causal prompt
trained with next-token loss on every level, and the remainder is trained
with the masked-span objective on one sampled level, with the prompt fully
attendable.  Both losses flow through a single backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .model import ToyModel, TrainBatch, fused_losses_and_grads
from .schedules import gamma
from .spans import sample_training_spans, solve_num_spans

__all__ = ["HybridBatch", "hybrid_train_step"]


@dataclass
class HybridBatch:
    """A training batch plus per-example autoregressive prompt lengths.

    ``t_switch[i]`` is the first undelayed time of example i's parallel
    region; it must lie in [1, T], where T means the whole sequence is
    trained autoregressively.
    """

    grids: np.ndarray
    cond: np.ndarray
    t_switch: np.ndarray
    levels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        base = TrainBatch(self.grids, self.cond, self.levels, self.masks)
        self.grids = base.grids
        self.cond = base.cond
        self.levels = base.levels
        self.masks = base.masks
        t_switch = np.asarray(self.t_switch, dtype=np.int64)
        b, _, t = self.grids.shape
        if t_switch.shape != (b,):
            raise ValueError(f"t_switch must have shape ({b},), got {t_switch.shape}")
        if t_switch.size and (t_switch.min() < 1 or t_switch.max() > t):
            raise ValueError(f"t_switch values must lie in [1, {t}]")
        self.t_switch = t_switch

    @classmethod
    def sample(cls, batch: TrainBatch, rng: np.random.Generator) -> "HybridBatch":
        """Attach switch times drawn uniformly from {1, ..., T}."""
        b, _, t = batch.grids.shape
        t_switch = rng.integers(1, t + 1, size=b)
        return cls(batch.grids, batch.cond, t_switch, batch.levels, batch.masks)


def hybrid_train_step(
    model: ToyModel,
    batch: HybridBatch,
    rng: np.random.Generator,
    total_steps: int = 20,
    span_len: int = 3,
    update: bool = True,
) -> tuple[Optional[float], Optional[float]]:
    """One combined update; returns (loss_ar, loss_nar).

    Span masks are solved against each example's parallel region length, so
    the masking-rate semantics hold within the region being trained.  A loss
    whose region is empty across the batch is returned as None, not zero.
    """
    cfg = model.config
    if cfg.mode != "fused":
        raise ValueError("hybrid training requires a model with mode='fused'")
    grids = batch.grids
    b, k, t = grids.shape
    if k != cfg.num_levels or t > cfg.max_len:
        raise ValueError(f"batch grids {grids.shape} incompatible with model config")
    levels = batch.levels if batch.levels is not None else rng.integers(0, cfg.num_levels, size=b)
    if batch.masks is not None:
        masks = batch.masks
    else:
        masks = np.zeros((b, t), dtype=bool)
        for i in range(b):
            sw = int(batch.t_switch[i])
            if sw >= t:
                continue
            region = t - sw
            span = min(span_len, region)
            step = int(rng.integers(1, total_steps + 1))
            num = solve_num_spans(region, span, gamma(step, total_steps))
            masks[i, sw:] = sample_training_spans(region, span, num, rng)
    loss_ar, loss_nar, grads = fused_losses_and_grads(
        model, grids, batch.cond, batch.t_switch, levels, masks, rng
    )
    if update:
        model.apply_grads(grads)
    return loss_ar, loss_nar
