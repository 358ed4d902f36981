"""Synthetic multi-level token data with known local structure.

The coarsest level follows a per-condition sparse Markov chain; every finer
level is a deterministic polynomial rolling hash of a small window of the
level below, mirroring the local residual structure of stacked quantizers.
Because the fine levels are exact functions of their predecessor, decoded
grids can be scored objectively: consistency measures how often the model
reproduced the hash, and the coarse level's NLL under the true chain
measures distributional fit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grids import TokenGrid

__all__ = [
    "SynthTask",
    "consistency_score",
    "derive_level",
    "entropy_rate",
    "generate",
    "level1_nll",
    "make_default_task",
]

DEFAULT_SUCCESSORS = 4
DEFAULT_FLOOR = 0.04
DEFAULT_GROUP_SIZE = 8
DEFAULT_WINDOW = 2
DEFAULT_HASH_BASE = 8
DEFAULT_HASH_SALTS = (5, 11, 17)


@dataclass(frozen=True)
class SynthTask:
    """Geometry plus the exact generative process.

    ``transitions`` holds one row-stochastic (vocab x vocab) matrix per
    condition.  Levels above the first are produced by per-level hashes
    H_k(window) = (sum_j window_j * base^(2*window-j) + salt_k) mod vocab
    over the (2*window + 1)-wide neighborhood of the level below, with
    reflective boundary handling.
    """

    num_levels: int
    length: int
    vocab: int
    cond_count: int
    transitions: np.ndarray
    window: int = DEFAULT_WINDOW
    hash_bases: tuple[int, ...] = ()
    hash_salts: tuple[int, ...] = ()
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.num_levels, self.length, self.vocab, self.cond_count) < 1:
            raise ValueError("num_levels, length, vocab, and cond_count must be >= 1")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        trans = np.asarray(self.transitions, dtype=np.float64)
        expected = (self.cond_count, self.vocab, self.vocab)
        if trans.shape != expected:
            raise ValueError(f"transitions must have shape {expected}, got {trans.shape}")
        if trans.min() < 0:
            raise ValueError("transition probabilities must be non-negative")
        sums = trans.sum(axis=2)
        if np.abs(sums - 1.0).max() > 1e-9:
            raise ValueError("transition rows must sum to 1 within 1e-9")
        object.__setattr__(self, "transitions", trans)
        n_hash = self.num_levels - 1
        bases = tuple(int(b) for b in self.hash_bases) or (DEFAULT_HASH_BASE,) * n_hash
        salts = tuple(int(s) for s in self.hash_salts) or DEFAULT_HASH_SALTS[:n_hash]
        if len(bases) != n_hash or len(salts) != n_hash:
            raise ValueError(f"need {n_hash} hash bases and salts, got {len(bases)} and {len(salts)}")
        if any(b < 1 for b in bases):
            raise ValueError("hash bases must be >= 1")
        object.__setattr__(self, "hash_bases", bases)
        object.__setattr__(self, "hash_salts", salts)

    def hash_coeffs(self, level: int) -> np.ndarray:
        """Polynomial coefficients of H_level over the window tuple."""
        if not 1 <= level < self.num_levels:
            raise ValueError(f"level {level} has no hash (valid: 1..{self.num_levels - 1})")
        base = self.hash_bases[level - 1]
        width = 2 * self.window + 1
        return np.array([pow(base, width - 1 - j, self.vocab) for j in range(width)], dtype=np.int64)


def make_default_task(seed: int = 0, *, length: int = 64) -> SynthTask:
    """The stock task: K=4, N=32, C=4 sparse chains, window-2 hashes.

    States are partitioned into residue classes modulo
    ``vocab // DEFAULT_GROUP_SIZE``; per condition, every class draws one
    set of ``DEFAULT_SUCCESSORS`` successor states inside that class,
    shared by all of the class's rows, and 1 - floor is spread uniformly
    over it (the rest goes uniformly over the whole vocabulary).  Sequences
    therefore dwell inside one residue class whose conditional law depends
    only on (condition, class), a structure small desk-scale models pick up
    within a short training budget, while conditions stay genuinely
    distinct (each draws different successor sets).  The class residue is
    exactly the coarse component the rolling hash keeps of its off-center
    input, so clean grids exercise a compact, well-covered set of hash
    inputs while corrupted coarse rows immediately expose untrained
    combinations; that makes fine-level consistency genuinely sensitive to
    coarse-level sample quality.  Uniform successor weights keep the
    per-step NLL of typical sequences close to the chain's entropy rate,
    which makes the NLL a stable quality reference for decoded samples.
    """
    n, c = 32, 4
    rng = np.random.default_rng(seed)
    trans = np.full((c, n, n), DEFAULT_FLOOR / n, dtype=np.float64)
    share = (1.0 - DEFAULT_FLOOR) / DEFAULT_SUCCESSORS
    n_classes = n // DEFAULT_GROUP_SIZE
    for ci in range(c):
        for g in range(n_classes):
            members = np.arange(g, n, n_classes)
            successors = rng.choice(members, size=DEFAULT_SUCCESSORS, replace=False)
            trans[ci, members[:, None], successors[None, :]] += share
    return SynthTask(
        num_levels=4,
        length=length,
        vocab=n,
        cond_count=c,
        transitions=trans,
        window=DEFAULT_WINDOW,
        seed=seed,
    )


def derive_level(task: SynthTask, lower: np.ndarray, level: int) -> np.ndarray:
    """Apply H_level to a complete row of level - 1 tokens."""
    lower = np.asarray(lower, dtype=np.int64)
    if lower.ndim != 1:
        raise ValueError(f"lower row must be 1-D, got shape {lower.shape}")
    if lower.min() < 0 or lower.max() >= task.vocab:
        raise ValueError("lower row contains out-of-vocabulary ids")
    coeffs = task.hash_coeffs(level)
    w = task.window
    padded = np.pad(lower, w, mode="reflect")
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * w + 1)
    salt = task.hash_salts[level - 1]
    return (windows @ coeffs + salt) % task.vocab


def generate(task: SynthTask, cond: int, rng: np.random.Generator) -> TokenGrid:
    """Draw one fully decoded grid for the given condition label."""
    if not 0 <= cond < task.cond_count:
        raise ValueError(f"cond {cond} out of range [0, {task.cond_count})")
    cells = np.empty((task.num_levels, task.length), dtype=np.int64)
    cums = np.cumsum(task.transitions[cond], axis=1)
    state = int(rng.integers(task.vocab))
    cells[0, 0] = state
    for t in range(1, task.length):
        state = min(int(np.searchsorted(cums[state], rng.random(), side="right")), task.vocab - 1)
        cells[0, t] = state
    for level in range(1, task.num_levels):
        cells[level] = derive_level(task, cells[level - 1], level)
    return TokenGrid(task.vocab, cells)


def consistency_score(grid: TokenGrid, task: SynthTask) -> float:
    """Fraction of fine-level cells equal to the hash of the level below."""
    if grid.num_levels != task.num_levels or grid.vocab != task.vocab:
        raise ValueError("grid geometry does not match the task")
    if task.num_levels < 2:
        raise ValueError("consistency needs at least two levels")
    if np.any(grid.cells == grid.mask_id):
        raise ValueError("grid still contains masked cells")
    matches = 0
    for level in range(1, task.num_levels):
        expected = derive_level(task, grid.cells[level - 1], level)
        matches += int((grid.cells[level] == expected).sum())
    return matches / ((task.num_levels - 1) * grid.length)


def entropy_rate(task: SynthTask, cond: int) -> float:
    """Per-step entropy (nats) of the condition's chain at stationarity."""
    if not 0 <= cond < task.cond_count:
        raise ValueError(f"cond {cond} out of range [0, {task.cond_count})")
    p = task.transitions[cond]
    pi = np.full(task.vocab, 1.0 / task.vocab)
    for _ in range(500):
        nxt = pi @ p
        if np.abs(nxt - pi).max() < 1e-14:
            pi = nxt
            break
        pi = nxt
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(p > 0, np.log(p), 0.0)
    return float(-(pi[:, None] * p * logs).sum())


def level1_nll(grid: TokenGrid, task: SynthTask, cond: int) -> float:
    """Mean transition NLL (nats/token) of the coarsest level under the chain.

    The initial token's marginal is excluded; only the length - 1
    transitions are scored.
    """
    if not 0 <= cond < task.cond_count:
        raise ValueError(f"cond {cond} out of range [0, {task.cond_count})")
    if grid.vocab != task.vocab:
        raise ValueError("grid vocabulary does not match the task")
    row = grid.cells[0]
    if np.any(row == grid.mask_id):
        raise ValueError("coarsest level still contains masked cells")
    if row.size < 2:
        raise ValueError("need at least two tokens to score transitions")
    p = task.transitions[cond, row[:-1], row[1:]]
    if p.min() <= 0:
        return float("inf")
    return float(-np.log(p).mean())
