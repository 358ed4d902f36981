"""Small trainable transformer over token grids, in plain numpy.

Forward *and* backward passes are written out by hand so the finite-
difference gradient check exercises real code rather than an autodiff
framework.  The same parameter set serves two input layouts:

* "nar" mode: per-level forwards over the undelayed grid.  The input at
  time t sums the embeddings of levels <= k (level k itself holding a mix
  of tokens and MASK), a learned positional embedding, and a condition
  embedding.  A per-level head reads out logits over the vocabulary.
* "fused" mode: one forward over the delayed layout with a BOS slot.
  Position p takes delayed column p - 1 (summed over all level embeddings,
  padding rows included) and predicts delayed column p, which supports
  autoregressive, hybrid, and parallel objectives under one attention mask.

Conditioning is a discrete label embedded additively; a reserved NULL row
(trained via condition dropout) provides the unconditional branch used by
classifier-free guidance.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .attn import full_mask, fused_hybrid_mask, restricted_mask
from .grids import delay_cells
from .schedules import gamma
from .spans import sample_training_spans, solve_num_spans

LN_EPS = 1e-5
ADAM_EPS = 1e-8
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Geometry and training knobs for the toy transformer."""

    num_levels: int = 4
    vocab: int = 32
    max_len: int = 64
    cond_count: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_mult: int = 4
    cond_dropout: float = 0.3
    window: Optional[int] = 5
    mode: str = "nar"
    lr: float = 3e-4
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self) -> None:
        for name in ("num_levels", "vocab", "max_len", "cond_count", "d_model", "n_heads", "n_layers", "ffn_mult"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.cond_dropout <= 1.0:
            raise ValueError(f"cond_dropout must be in [0, 1], got {self.cond_dropout}")
        if self.window is not None and self.window < 0:
            raise ValueError(f"window must be >= 0 or None, got {self.window}")
        if self.mode not in ("nar", "fused"):
            raise ValueError(f"mode must be 'nar' or 'fused', got {self.mode!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def pad_id(self) -> int:
        return self.vocab + 1

    @property
    def null_cond(self) -> int:
        return self.cond_count

    @property
    def n_positions(self) -> int:
        # covers the fused layout: BOS + (max_len + num_levels - 1) columns
        return self.max_len + self.num_levels


@dataclass
class TrainBatch:
    """Targets plus conditioning; level/mask columns are sampled when absent.

    grids: (B, K, T) ground-truth token ids; cond: (B,) labels;
    levels: optional (B,) 0-based level per example; masks: optional (B, T)
    boolean span masks for the chosen level.
    """

    grids: np.ndarray
    cond: np.ndarray
    levels: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.grids = np.asarray(self.grids, dtype=np.int64)
        self.cond = np.asarray(self.cond, dtype=np.int64)
        if self.grids.ndim != 3:
            raise ValueError(f"grids must be (B, K, T), got {self.grids.shape}")
        if self.cond.shape != (self.grids.shape[0],):
            raise ValueError(f"cond shape {self.cond.shape} != ({self.grids.shape[0]},)")
        if self.levels is not None:
            self.levels = np.asarray(self.levels, dtype=np.int64)
            if self.levels.shape != self.cond.shape:
                raise ValueError("levels must be (B,)")
        if self.masks is not None:
            self.masks = np.asarray(self.masks, dtype=bool)
            if self.masks.shape != (self.grids.shape[0], self.grids.shape[2]):
                raise ValueError("masks must be (B, T)")


class ToyModel:
    """Transformer parameters plus Adam state; see the module docstring."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.params: dict[str, np.ndarray] = {}
        self._adam_m: dict[str, np.ndarray] = {}
        self._adam_v: dict[str, np.ndarray] = {}
        self._adam_t: dict[str, int] = {}
        self.forward_calls = 0
        self._init_params()

    # ------------------------------------------------------------------
    # parameters

    def _init_params(self) -> None:
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        dt = np.dtype(cfg.dtype)
        scale = 1.0 / np.sqrt(cfg.d_model)

        def u(*shape):
            return rng.uniform(-scale, scale, size=shape).astype(dt)

        p = self.params
        for j in range(cfg.num_levels):
            p[f"emb_l{j}"] = u(cfg.vocab + 2, cfg.d_model)  # tokens + MASK + PAD
        p["cond_emb"] = u(cfg.cond_count + 1, cfg.d_model)  # labels + NULL
        p["pos_emb"] = u(cfg.n_positions, cfg.d_model)
        p["bos_emb"] = u(cfg.d_model)
        for i in range(cfg.n_layers):
            p[f"ln1_g_{i}"] = np.ones(cfg.d_model, dtype=dt)
            p[f"ln1_b_{i}"] = np.zeros(cfg.d_model, dtype=dt)
            p[f"wqkv_{i}"] = u(cfg.d_model, 3 * cfg.d_model)
            p[f"bqkv_{i}"] = np.zeros(3 * cfg.d_model, dtype=dt)
            p[f"wo_{i}"] = u(cfg.d_model, cfg.d_model)
            p[f"bo_{i}"] = np.zeros(cfg.d_model, dtype=dt)
            p[f"ln2_g_{i}"] = np.ones(cfg.d_model, dtype=dt)
            p[f"ln2_b_{i}"] = np.zeros(cfg.d_model, dtype=dt)
            p[f"w1_{i}"] = u(cfg.d_model, cfg.ffn_mult * cfg.d_model)
            p[f"b1_{i}"] = np.zeros(cfg.ffn_mult * cfg.d_model, dtype=dt)
            p[f"w2_{i}"] = u(cfg.ffn_mult * cfg.d_model, cfg.d_model)
            p[f"b2_{i}"] = np.zeros(cfg.d_model, dtype=dt)
        p["lnf_g"] = np.ones(cfg.d_model, dtype=dt)
        p["lnf_b"] = np.zeros(cfg.d_model, dtype=dt)
        for j in range(cfg.num_levels):
            p[f"head_w_{j}"] = u(cfg.d_model, cfg.vocab)
            p[f"head_b_{j}"] = np.zeros(cfg.vocab, dtype=dt)

    def num_params(self) -> int:
        return sum(int(v.size) for v in self.params.values())

    def default_level_mask(self, level: int, length: int) -> np.ndarray:
        """Attention mask a level uses when none is injected.

        Level 0 sees the whole sequence; refinement levels are restricted to
        the configured window (or full when window is None).
        """
        if level == 0 or self.config.window is None:
            return full_mask(length)
        return restricted_mask(length, self.config.window)

    # ------------------------------------------------------------------
    # trunk forward/backward

    def _trunk_forward(self, x: np.ndarray, attn_mask: np.ndarray) -> tuple[np.ndarray, list]:
        cfg = self.config
        p = self.params
        self.forward_calls += 1
        caches = []
        if attn_mask.ndim == 2:
            attn_mask = attn_mask[None]
        mask4 = attn_mask[:, None, :, :]  # (B or 1, 1, S, S)
        for i in range(cfg.n_layers):
            a, ln1c = _ln_fwd(x, p[f"ln1_g_{i}"], p[f"ln1_b_{i}"])
            o, attc = _attn_fwd(a, mask4, p[f"wqkv_{i}"], p[f"bqkv_{i}"], p[f"wo_{i}"], p[f"bo_{i}"], cfg.n_heads)
            x = x + o
            a2, ln2c = _ln_fwd(x, p[f"ln2_g_{i}"], p[f"ln2_b_{i}"])
            f, ffnc = _ffn_fwd(a2, p[f"w1_{i}"], p[f"b1_{i}"], p[f"w2_{i}"], p[f"b2_{i}"])
            x = x + f
            caches.append((ln1c, attc, ln2c, ffnc))
        h, lnfc = _ln_fwd(x, p["lnf_g"], p["lnf_b"])
        caches.append(lnfc)
        return h, caches

    def _trunk_backward(self, dh: np.ndarray, caches: list, grads: dict) -> np.ndarray:
        cfg = self.config
        p = self.params
        dx = _ln_bwd(dh, caches[-1], grads, "lnf_g", "lnf_b")
        for i in reversed(range(cfg.n_layers)):
            ln1c, attc, ln2c, ffnc = caches[i]
            da2 = _ffn_bwd(dx, ffnc, p[f"w1_{i}"], p[f"w2_{i}"], grads, f"w1_{i}", f"b1_{i}", f"w2_{i}", f"b2_{i}")
            dx = dx + _ln_bwd(da2, ln2c, grads, f"ln2_g_{i}", f"ln2_b_{i}")
            da = _attn_bwd(dx, attc, p[f"wqkv_{i}"], p[f"wo_{i}"], grads, f"wqkv_{i}", f"bqkv_{i}", f"wo_{i}", f"bo_{i}")
            dx = dx + _ln_bwd(da, ln1c, grads, f"ln1_g_{i}", f"ln1_b_{i}")
        return dx

    # ------------------------------------------------------------------
    # per-level (nar) input assembly

    def _nar_inputs(self, grids: np.ndarray, levels: np.ndarray, cond_ids: np.ndarray) -> np.ndarray:
        cfg = self.config
        p = self.params
        b, k, t = grids.shape
        x = np.zeros((b, t, cfg.d_model), dtype=p["pos_emb"].dtype)
        for j in range(cfg.num_levels):
            use = levels >= j
            if not use.any():
                continue
            x[use] += p[f"emb_l{j}"][grids[use, j, :]]
        x += p["pos_emb"][:t][None]
        x += p["cond_emb"][cond_ids][:, None, :]
        return x

    def _nar_inputs_backward(self, dx: np.ndarray, grids: np.ndarray, levels: np.ndarray, cond_ids: np.ndarray, grads: dict) -> None:
        cfg = self.config
        b, k, t = grids.shape
        for j in range(cfg.num_levels):
            use = levels >= j
            if not use.any():
                continue
            g = _grad_slot(grads, f"emb_l{j}", self.params)
            sel = np.flatnonzero(use)
            np.add.at(g, grids[sel, j, :].ravel(), dx[sel].reshape(-1, cfg.d_model))
        gp = _grad_slot(grads, "pos_emb", self.params)
        gp[:t] += dx.sum(axis=0)
        gc = _grad_slot(grads, "cond_emb", self.params)
        np.add.at(gc, cond_ids, dx.sum(axis=1))

    # ------------------------------------------------------------------
    # fused (delayed + BOS) input assembly

    def _fused_inputs(self, delayed: np.ndarray, cond_ids: np.ndarray) -> np.ndarray:
        cfg = self.config
        p = self.params
        b, k, tc = delayed.shape
        s = tc + 1
        x = np.zeros((b, s, cfg.d_model), dtype=p["pos_emb"].dtype)
        x[:, 0] = p["bos_emb"]
        for j in range(cfg.num_levels):
            x[:, 1:] += p[f"emb_l{j}"][delayed[:, j, :]]
        x += p["pos_emb"][:s][None]
        x += p["cond_emb"][cond_ids][:, None, :]
        return x

    def _fused_inputs_backward(self, dx: np.ndarray, delayed: np.ndarray, cond_ids: np.ndarray, grads: dict) -> None:
        cfg = self.config
        b, k, tc = delayed.shape
        _grad_slot(grads, "bos_emb", self.params)[...] += dx[:, 0].sum(axis=0)
        for j in range(cfg.num_levels):
            g = _grad_slot(grads, f"emb_l{j}", self.params)
            np.add.at(g, delayed[:, j, :].ravel(), dx[:, 1:].reshape(-1, cfg.d_model))
        gp = _grad_slot(grads, "pos_emb", self.params)
        gp[: tc + 1] += dx.sum(axis=0)
        gc = _grad_slot(grads, "cond_emb", self.params)
        np.add.at(gc, cond_ids, dx.sum(axis=1))

    # ------------------------------------------------------------------
    # heads

    def head_logits(self, h: np.ndarray, level: int) -> np.ndarray:
        """Project hidden states onto the vocabulary of one level."""
        return h @ self.params[f"head_w_{level}"] + self.params[f"head_b_{level}"]

    def fused_level_logits(self, h: np.ndarray, level: int, length: int) -> np.ndarray:
        """Per-time logits (length, vocab) for one level, read from fused states.

        Fused position p predicts delayed column p, and level k's token at
        time t sits in column t + k, so the row for time t comes from h[t + k].
        """
        if not 0 <= level < self.config.num_levels:
            raise ValueError(f"level {level} out of range [0, {self.config.num_levels})")
        cols = np.arange(length) + level
        if cols[-1] >= h.shape[0]:
            raise ValueError("fused hidden states too short for requested length")
        return self.head_logits(h[cols], level)

    def _head_backward(self, dlogits: np.ndarray, h: np.ndarray, level: int, grads: dict) -> np.ndarray:
        gw = _grad_slot(grads, f"head_w_{level}", self.params)
        gb = _grad_slot(grads, f"head_b_{level}", self.params)
        flat_h = h.reshape(-1, h.shape[-1])
        flat_d = dlogits.reshape(-1, dlogits.shape[-1])
        gw += flat_h.T @ flat_d
        gb += flat_d.sum(axis=0)
        return dlogits @ self.params[f"head_w_{level}"].T

    # ------------------------------------------------------------------
    # public forward (per-level, undelayed)

    def forward(
        self,
        grid_cells: np.ndarray,
        level: int,
        cond: Optional[int],
        attn_mask: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Logits (T, vocab) for one level of one grid.

        Levels below ``level`` must hold context tokens; ``level`` itself may
        mix tokens and MASK ids; levels above are ignored.  ``cond=None``
        selects the NULL (unconditional) row.
        """
        cfg = self.config
        cells = np.asarray(grid_cells, dtype=np.int64)
        if cells.ndim != 2 or cells.shape[0] != cfg.num_levels:
            raise ValueError(f"grid must be ({cfg.num_levels}, T), got {cells.shape}")
        t = cells.shape[1]
        if t > cfg.max_len:
            raise ValueError(f"length {t} exceeds max_len {cfg.max_len}")
        if not 0 <= level < cfg.num_levels:
            raise ValueError(f"level {level} out of range [0, {cfg.num_levels})")
        if cells.min() < 0 or cells.max() > cfg.mask_id:
            raise ValueError("grid cells out of range (delayed/pad ids not allowed here)")
        cond_id = cfg.null_cond if cond is None else int(cond)
        if not 0 <= cond_id <= cfg.cond_count:
            raise ValueError(f"cond {cond} out of range [0, {cfg.cond_count})")
        if attn_mask is None:
            attn_mask = self.default_level_mask(level, t)
        attn_mask = np.asarray(attn_mask, dtype=bool)
        if attn_mask.shape != (t, t):
            raise ValueError(f"attn_mask shape {attn_mask.shape} != ({t}, {t})")
        x = self._nar_inputs(cells[None], np.array([level]), np.array([cond_id]))
        h, _ = self._trunk_forward(x, attn_mask)
        return self.head_logits(h, level)[0]

    def fused_forward(self, delayed: np.ndarray, cond: Optional[int], attn_mask: np.ndarray) -> np.ndarray:
        """Hidden states (S, d_model) for one delayed grid plus BOS."""
        cfg = self.config
        delayed = np.asarray(delayed, dtype=np.int64)
        if delayed.ndim != 2 or delayed.shape[0] != cfg.num_levels:
            raise ValueError(f"delayed grid must be ({cfg.num_levels}, T'), got {delayed.shape}")
        cond_id = cfg.null_cond if cond is None else int(cond)
        if not 0 <= cond_id <= cfg.cond_count:
            raise ValueError(f"cond {cond} out of range [0, {cfg.cond_count})")
        s = delayed.shape[1] + 1
        attn_mask = np.asarray(attn_mask, dtype=bool)
        if attn_mask.shape != (s, s):
            raise ValueError(f"attn_mask shape {attn_mask.shape} != ({s}, {s})")
        x = self._fused_inputs(delayed[None], np.array([cond_id]))
        h, _ = self._trunk_forward(x, attn_mask)
        return h[0]

    # ------------------------------------------------------------------
    # optimizer

    def apply_grads(self, grads: dict[str, np.ndarray]) -> None:
        """One Adam update from accumulated gradients."""
        lr = self.config.lr
        for name, g in grads.items():
            p = self.params[name]
            m = self._adam_m.setdefault(name, np.zeros_like(p))
            v = self._adam_v.setdefault(name, np.zeros_like(p))
            t = self._adam_t.get(name, 0) + 1
            self._adam_t[name] = t
            m *= ADAM_BETA1
            m += (1 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1 - ADAM_BETA2) * g * g
            mhat = m / (1 - ADAM_BETA1**t)
            vhat = v / (1 - ADAM_BETA2**t)
            p -= (lr * mhat / (np.sqrt(vhat) + ADAM_EPS)).astype(p.dtype)


# ----------------------------------------------------------------------
# losses


def masked_ce_loss(logits: np.ndarray, targets: np.ndarray, mask_row: np.ndarray) -> float:
    """Mean cross-entropy over masked positions only."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    mask_row = np.asarray(mask_row, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask_row.shape != targets.shape:
        raise ValueError(
            f"inconsistent shapes: logits {logits.shape}, targets {targets.shape}, mask {mask_row.shape}"
        )
    if not mask_row.any():
        raise ValueError("mask_row must select at least one position")
    sel = logits[mask_row]
    tgt = targets[mask_row]
    lse = _logsumexp(sel)
    return float(np.mean(lse - sel[np.arange(len(tgt)), tgt]))


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return (m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True)))[..., 0]


def _ce_sum_and_grad(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Summed CE over rows of (M, N) logits; gradient of the *sum*."""
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    denom = ez.sum(axis=-1, keepdims=True)
    logp = z - np.log(denom)
    rows = np.arange(logits.shape[0])
    loss = float(-logp[rows, targets].sum())
    grad = ez / denom
    grad[rows, targets] -= 1.0
    return loss, grad


# ----------------------------------------------------------------------
# training steps


def train_step_nar(
    model: ToyModel,
    batch: TrainBatch,
    rng: np.random.Generator,
    total_steps: int = 20,
    span_len: int = 3,
    update: bool = True,
) -> float:
    """One masked-prediction step: sample a decode iteration and a span mask
    per example, teacher-force lower levels, drop the condition with the
    configured probability, update parameters, and return the pre-update loss.
    """
    cfg = model.config
    if cfg.mode != "nar":
        raise ValueError("train_step_nar requires a model with mode='nar'")
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
            step = int(rng.integers(1, total_steps + 1))
            rate = gamma(step, total_steps)
            u = solve_num_spans(t, span_len, rate)
            masks[i] = sample_training_spans(t, span_len, u, rng)
    if not masks.any(axis=1).all():
        # gamma never reaches zero, but a provided mask row may be empty
        raise ValueError("every example needs at least one masked position")
    cond_ids = batch.cond.copy()
    if cfg.cond_dropout > 0:
        drop = rng.random(b) < cfg.cond_dropout
        cond_ids[drop] = cfg.null_cond

    work = grids.copy()
    for i in range(b):
        work[i, levels[i], masks[i]] = cfg.mask_id

    loss, grads = _nar_loss_and_grads(model, work, grids, levels, cond_ids, masks)
    if update:
        model.apply_grads(grads)
    return loss


def _nar_loss_and_grads(
    model: ToyModel,
    work_grids: np.ndarray,
    target_grids: np.ndarray,
    levels: np.ndarray,
    cond_ids: np.ndarray,
    masks: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    cfg = model.config
    b, k, t = work_grids.shape
    attn = np.stack([model.default_level_mask(int(lv), t) for lv in levels])
    x = model._nar_inputs(work_grids, levels, cond_ids)
    h, caches = model._trunk_forward(x, attn)

    grads: dict[str, np.ndarray] = {}
    dh = np.zeros_like(h)
    total_loss = 0.0
    total_count = int(masks.sum())
    for lv in np.unique(levels):
        sel = levels == lv
        hsel = h[sel]
        logits = model.head_logits(hsel, int(lv))
        msel = masks[sel]
        flat_logits = logits[msel].astype(np.float64)
        flat_targets = target_grids[sel][:, lv, :][msel]
        loss_sum, dflat = _ce_sum_and_grad(flat_logits, flat_targets)
        total_loss += loss_sum
        dlogits = np.zeros_like(logits)
        dlogits[msel] = (dflat / total_count).astype(dlogits.dtype)
        dh[sel] += model._head_backward(dlogits, hsel, int(lv), grads)
    dx = model._trunk_backward(dh, caches, grads)
    model._nar_inputs_backward(dx, work_grids, levels, cond_ids, grads)
    return total_loss / total_count, grads


def train_step_ar(model: ToyModel, batch: TrainBatch, rng: np.random.Generator, update: bool = True) -> float:
    """Next-token training over the delayed layout with causal attention.

    Every non-padding cell of every level contributes; equivalent to the
    hybrid objective with the switch at the sequence end.
    """
    b = batch.grids.shape[0]
    t = batch.grids.shape[2]
    t_switches = np.full(b, t, dtype=np.int64)
    loss_ar, _loss_nar, grads = fused_losses_and_grads(
        model, batch.grids, batch.cond, t_switches, levels=None, nar_masks=None, rng=rng
    )
    if update:
        model.apply_grads(grads)
    return loss_ar


def fused_losses_and_grads(
    model: ToyModel,
    grids: np.ndarray,
    cond: np.ndarray,
    t_switches: np.ndarray,
    levels: Optional[np.ndarray],
    nar_masks: Optional[np.ndarray],
    rng: np.random.Generator,
    logit_hook=None,
) -> tuple[Optional[float], Optional[float], dict[str, np.ndarray]]:
    """Shared core of the autoregressive and hybrid objectives.

    For each example: tokens at undelayed times < t_switch get next-token CE
    (all levels); at times >= t_switch, masked cells of the example's chosen
    level get masked CE; levels above it are hidden, levels below are teacher-
    forced.  Returns (loss_ar, loss_nar, grads); a loss is None when its
    region is empty across the whole batch.  ``logit_hook`` lets tests perturb
    per-level logits before the losses are read off.
    """
    cfg = model.config
    if cfg.mode != "fused":
        raise ValueError("the autoregressive/hybrid objectives require mode='fused'")
    grids = np.asarray(grids, dtype=np.int64)
    b, k, t = grids.shape
    if k != cfg.num_levels or t > cfg.max_len:
        raise ValueError(f"batch grids {grids.shape} incompatible with model config")
    t_switches = np.asarray(t_switches, dtype=np.int64)
    if t_switches.min() < 0 or t_switches.max() > t:
        raise ValueError("t_switch values must lie in [0, T]")
    if nar_masks is None and (t_switches < t).any():
        raise ValueError("examples with t_switch < T need span masks for the parallel region")
    cond_ids = np.asarray(cond, dtype=np.int64).copy()
    if cfg.cond_dropout > 0:
        drop = rng.random(b) < cfg.cond_dropout
        cond_ids[drop] = cfg.null_cond
    if levels is None:
        levels = np.zeros(b, dtype=np.int64)
    times = np.arange(t)

    # working grid: ground truth in the prompt region; in the NAR region the
    # chosen level is masked per nar_masks, higher levels are hidden
    work = grids.copy()
    for i in range(b):
        sw = int(t_switches[i])
        if sw >= t:
            continue
        lv = int(levels[i])
        region = times >= sw
        if nar_masks is not None:
            if nar_masks[i, :sw].any():
                raise ValueError("span masks must not reach into the prompt region")
            work[i, lv, region & nar_masks[i]] = cfg.mask_id
        work[i, lv + 1 :, region] = cfg.mask_id

    delayed_work = np.stack([delay_cells(w, cfg.pad_id) for w in work])
    delayed_truth = np.stack([delay_cells(g, cfg.pad_id) for g in grids])
    attn = np.stack([fused_hybrid_mask(t, cfg.num_levels, int(sw), cfg.window) for sw in t_switches])

    x = model._fused_inputs(delayed_work, cond_ids)
    h, caches = model._trunk_forward(x, attn)

    grads: dict[str, np.ndarray] = {}
    dh = np.zeros_like(h)
    tc = delayed_work.shape[2]

    # per-level target/selection tables in (B, S) position space: position p
    # predicts delayed column p
    ar_sum = 0.0
    ar_count = 0
    nar_sum = 0.0
    nar_count = 0
    level_sel_ar = []
    level_sel_nar = []
    for j in range(cfg.num_levels):
        valid = np.zeros((b, tc), dtype=bool)
        valid[:, j : j + t] = True
        tok_time = np.arange(tc)[None, :] - j
        in_prompt = valid & (tok_time < t_switches[:, None])
        in_nar = np.zeros((b, tc), dtype=bool)
        if nar_masks is not None:
            for i in range(b):
                if levels[i] == j and t_switches[i] < t:
                    region = (tok_time[0] >= t_switches[i]) & valid[i]
                    cols = np.flatnonzero(region)
                    in_nar[i, cols] = nar_masks[i, cols - j]
        level_sel_ar.append(in_prompt)
        level_sel_nar.append(in_nar)
        ar_count += int(in_prompt.sum())
        nar_count += int(in_nar.sum())

    for j in range(cfg.num_levels):
        sel_ar = level_sel_ar[j]
        sel_nar = level_sel_nar[j]
        if not sel_ar.any() and not sel_nar.any():
            continue
        logits = model.head_logits(h, j)  # (B, S, N)
        if logit_hook is not None:
            logits = logit_hook(j, logits)
        dlogits = np.zeros_like(logits)
        for sel, is_ar in ((sel_ar, True), (sel_nar, False)):
            if not sel.any():
                continue
            pos_sel = np.zeros((b, tc + 1), dtype=bool)
            pos_sel[:, : tc] = sel  # position p <-> column p
            flat_logits = logits[pos_sel].astype(np.float64)
            flat_targets = delayed_truth[:, j, :][sel]
            loss_sum, dflat = _ce_sum_and_grad(flat_logits, flat_targets)
            count = ar_count if is_ar else nar_count
            if is_ar:
                ar_sum += loss_sum
            else:
                nar_sum += loss_sum
            dlogits[pos_sel] += (dflat / count).astype(dlogits.dtype)
        dh += model._head_backward(dlogits, h, j, grads)
    dx = model._trunk_backward(dh, caches, grads)
    model._fused_inputs_backward(dx, delayed_work, cond_ids, grads)

    loss_ar = ar_sum / ar_count if ar_count else None
    loss_nar = nar_sum / nar_count if nar_count else None
    return loss_ar, loss_nar, grads


# ----------------------------------------------------------------------
# gradient check


def grad_check(
    model: ToyModel,
    batch: Optional[TrainBatch] = None,
    n_coords: int = 200,
    h: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
    _scale_analytic: float = 1.0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Requires a float64 model small enough to probe (the FD loop evaluates the
    loss twice per coordinate).  ``_scale_analytic`` exists so tests can
    verify the checker itself notices a deliberately wrong gradient.
    """
    cfg = model.config
    if cfg.dtype != "float64":
        raise ValueError("grad_check requires a float64 model")
    rng = np.random.default_rng(0) if rng is None else rng
    if batch is None:
        b, t = 3, min(8, cfg.max_len)
        grids = rng.integers(0, cfg.vocab, size=(b, cfg.num_levels, t))
        cond = rng.integers(0, cfg.cond_count, size=b)
        levels = rng.integers(0, cfg.num_levels, size=b)
        masks = rng.random((b, t)) < 0.5
        masks[~masks.any(axis=1), 0] = True
        batch = TrainBatch(grids, cond, levels, masks)

    work = batch.grids.copy()
    for i in range(work.shape[0]):
        work[i, batch.levels[i], batch.masks[i]] = cfg.mask_id

    def loss_only() -> float:
        loss, _ = _nar_loss_and_grads(model, work, batch.grids, batch.levels, batch.cond, batch.masks)
        return loss

    _, grads = _nar_loss_and_grads(model, work, batch.grids, batch.levels, batch.cond, batch.masks)

    names = sorted(model.params)
    sizes = np.array([model.params[n].size for n in names])
    total = int(sizes.sum())
    n_coords = min(n_coords, total)
    picks = rng.choice(total, size=n_coords, replace=False)
    bounds = np.cumsum(sizes)
    max_rel = 0.0
    for flat_idx in picks:
        which = int(np.searchsorted(bounds, flat_idx, side="right"))
        name = names[which]
        local = int(flat_idx - (bounds[which] - sizes[which]))
        p = model.params[name].ravel()
        orig = p[local]
        p[local] = orig + h
        up = loss_only()
        p[local] = orig - h
        down = loss_only()
        p[local] = orig
        fd = (up - down) / (2 * h)
        g = grads.get(name)
        an = float(g.ravel()[local]) if g is not None else 0.0
        an *= _scale_analytic
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: ToyModel, dir_path: str) -> None:
    """Manifest (tensor names/shapes/offsets + config echo) plus one blob of
    row-major little-endian float32 values; round-trips bit-exactly."""
    if model.config.dtype != "float32":
        raise ValueError("checkpoints store float32; train or cast the model to float32 first")
    os.makedirs(dir_path, exist_ok=True)
    tensors = []
    offset = 0
    chunks = []
    for name, arr in model.params.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "size": int(arr.size)})
        offset += int(arr.size)
        chunks.append(data.tobytes())
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": tensors,
    }
    with open(os.path.join(dir_path, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(dir_path, "params.bin"), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(dir_path: str) -> ToyModel:
    manifest_path = os.path.join(dir_path, "manifest.json")
    blob_path = os.path.join(dir_path, "params.bin")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint format version {manifest.get('format_version')}")
    cfg = ModelConfig(**manifest["config"])
    model = ToyModel(cfg)
    blob = np.fromfile(blob_path, dtype="<f4")
    expected = sum(t["size"] for t in manifest["tensors"])
    if blob.size != expected:
        raise ValueError(f"blob holds {blob.size} floats, manifest expects {expected}")
    seen = set()
    for entry in manifest["tensors"]:
        name, shape, off, size = entry["name"], tuple(entry["shape"]), entry["offset"], entry["size"]
        if name not in model.params:
            raise ValueError(f"unknown tensor {name!r} in manifest")
        if model.params[name].shape != shape:
            raise ValueError(f"tensor {name!r} shape {shape} != expected {model.params[name].shape}")
        model.params[name] = blob[off : off + size].reshape(shape).copy()
        seen.add(name)
    missing = set(model.params) - seen
    if missing:
        raise ValueError(f"manifest missing tensors: {sorted(missing)}")
    return model


# ----------------------------------------------------------------------
# layer primitives (forward + hand-written backward)


def _ln_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _ln_bwd(dy: np.ndarray, cache, grads: dict, g_name: str, b_name: str) -> np.ndarray:
    xhat, inv, g = cache
    # parameter grads accumulate over batch and sequence
    gg = grads.get(g_name)
    if gg is None:
        grads[g_name] = (dy * xhat).sum(axis=(0, 1))
        grads[b_name] = dy.sum(axis=(0, 1))
    else:
        gg += (dy * xhat).sum(axis=(0, 1))
        grads[b_name] += dy.sum(axis=(0, 1))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    return inv * (dxhat - m1 - xhat * m2)


def _attn_fwd(a: np.ndarray, mask4: np.ndarray, wqkv, bqkv, wo, bo, n_heads: int):
    b, s, d = a.shape
    dh = d // n_heads
    qkv = a @ wqkv + bqkv
    q, k_, v = np.split(qkv, 3, axis=-1)
    q = q.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
    k_ = k_.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
    v = v.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
    scores = q @ k_.transpose(0, 1, 3, 2) * (1.0 / math.sqrt(dh))
    scores = np.where(mask4, scores, scores.dtype.type(-np.inf))
    smax = scores.max(axis=-1, keepdims=True)
    ez = np.exp(scores - smax)
    p = ez / ez.sum(axis=-1, keepdims=True)
    ctx = p @ v
    merged = ctx.transpose(0, 2, 1, 3).reshape(b, s, d)
    o = merged @ wo + bo
    return o, (a, q, k_, v, p, merged)


def _attn_bwd(do: np.ndarray, cache, wqkv, wo, grads, wqkv_name, bqkv_name, wo_name, bo_name) -> np.ndarray:
    a, q, k_, v, p, merged = cache
    b, s, d = a.shape
    n_heads = q.shape[1]
    dh = d // n_heads
    flat_m = merged.reshape(-1, d)
    flat_do = do.reshape(-1, d)
    _acc(grads, wo_name, flat_m.T @ flat_do)
    _acc(grads, bo_name, flat_do.sum(axis=0))
    dmerged = do @ wo.T
    dctx = dmerged.reshape(b, s, n_heads, dh).transpose(0, 2, 1, 3)
    dp = dctx @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ dctx
    ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
    ds = ds * (1.0 / math.sqrt(dh))
    dq = ds @ k_
    dk = ds.transpose(0, 1, 3, 2) @ q
    dqkv = np.concatenate(
        [
            dq.transpose(0, 2, 1, 3).reshape(b, s, d),
            dk.transpose(0, 2, 1, 3).reshape(b, s, d),
            dv.transpose(0, 2, 1, 3).reshape(b, s, d),
        ],
        axis=-1,
    )
    flat_a = a.reshape(-1, d)
    flat_dqkv = dqkv.reshape(-1, 3 * d)
    _acc(grads, wqkv_name, flat_a.T @ flat_dqkv)
    _acc(grads, bqkv_name, flat_dqkv.sum(axis=0))
    return dqkv @ wqkv.T


_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inner = _GELU_C * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    y = 0.5 * x * (1.0 + th)
    dydx = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return y, dydx


def _ffn_fwd(a2: np.ndarray, w1, b1, w2, b2):
    h1 = a2 @ w1 + b1
    g, dg = _gelu(h1)
    y = g @ w2 + b2
    return y, (a2, g, dg)


def _ffn_bwd(dy: np.ndarray, cache, w1, w2, grads, w1_name, b1_name, w2_name, b2_name) -> np.ndarray:
    a2, g, dg = cache
    d_in = a2.shape[-1]
    d_mid = g.shape[-1]
    flat_g = g.reshape(-1, d_mid)
    flat_dy = dy.reshape(-1, dy.shape[-1])
    _acc(grads, w2_name, flat_g.T @ flat_dy)
    _acc(grads, b2_name, flat_dy.sum(axis=0))
    dgelu = (dy @ w2.T) * dg
    flat_a2 = a2.reshape(-1, d_in)
    flat_dg = dgelu.reshape(-1, d_mid)
    _acc(grads, w1_name, flat_a2.T @ flat_dg)
    _acc(grads, b1_name, flat_dg.sum(axis=0))
    return dgelu @ w1.T


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    cur = grads.get(name)
    if cur is None:
        grads[name] = value
    else:
        cur += value


def _grad_slot(grads: dict, name: str, params: dict) -> np.ndarray:
    g = grads.get(name)
    if g is None:
        g = np.zeros_like(params[name])
        grads[name] = g
    return g
