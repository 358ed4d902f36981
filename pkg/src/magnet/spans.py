"""Span placement combinatorics and span-level masking decisions.

Masking operates on short spans rather than independent tokens.  Placing u
spans of length l uniformly (without replacement among start positions) on a
circle of T cells covers an expected fraction

    rate(T, l, u) = 1 - C(T - l, u) / C(T, u)

of the cells: a fixed cell survives iff none of the u starts lands in the l
positions that would cover it, and the survivor count of starts is a draw of
u from the T - l non-covering starts.  ``enumerate_mask_rate`` checks the
closed form by brute force over all placements.

Decoding tiles a region with contiguous disjoint spans; ``span_scores`` and
``select_spans_to_mask`` implement the per-span confidence reduction and the
re-masking choice.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction
from math import comb

import numpy as np


@dataclass(frozen=True)
class SpanParams:
    """Span length in tokens plus the nominal frame rate used to pick it."""

    span_len: int = 3
    frame_rate: float = 50.0

    def __post_init__(self) -> None:
        if self.span_len < 1:
            raise ValueError(f"span_len must be >= 1, got {self.span_len}")
        if self.frame_rate <= 0:
            raise ValueError(f"frame_rate must be > 0, got {self.frame_rate}")


def span_len_from_ms(ms: float, frame_rate: float = 50.0) -> int:
    """Nominal ms -> token conversion; 60 ms at 50 tokens/s gives 3."""
    if ms <= 0 or frame_rate <= 0:
        raise ValueError(f"ms and frame_rate must be > 0, got {ms}, {frame_rate}")
    return max(1, round(ms * frame_rate / 1000.0))


def expected_mask_rate(length: int, span_len: int, num_spans: int) -> float:
    """Expected covered fraction for u spans of length l on a circle of T cells."""
    _check_geometry(length, span_len)
    if not 0 <= num_spans <= length:
        raise ValueError(f"num_spans must be in [0, {length}], got {num_spans}")
    # comb(n, k) is 0 for k > n, which makes the rate exactly 1 once spans
    # must overlap-cover everything; int/int division is correctly rounded.
    return 1.0 - comb(length - span_len, num_spans) / comb(length, num_spans)


def enumerate_mask_rate(length: int, span_len: int, num_spans: int) -> float:
    """Exact covered fraction by enumerating all C(T, u) circular placements.

    Independent of the closed form; cost grows as C(T, u), fine for T <= ~14.
    """
    _check_geometry(length, span_len)
    if not 0 <= num_spans <= length:
        raise ValueError(f"num_spans must be in [0, {length}], got {num_spans}")
    span_bits = [_circular_span_bits(length, span_len, s) for s in range(length)]
    covered_total = 0
    placements = 0
    for starts in itertools.combinations(range(length), num_spans):
        union = 0
        for s in starts:
            union |= span_bits[s]
        covered_total += union.bit_count()
        placements += 1
    return float(Fraction(covered_total, placements * length))


def _circular_span_bits(length: int, span_len: int, start: int) -> int:
    bits = 0
    for off in range(span_len):
        bits |= 1 << ((start + off) % length)
    return bits


def solve_num_spans(length: int, span_len: int, target_rate: float) -> int:
    """Smallest span count whose expected mask rate reaches ``target_rate``.

    The rate is strictly increasing in the span count until it saturates at
    1.0, so a binary search applies.  A tiny epsilon guards the comparison
    against float rounding of the closed form.
    """
    _check_geometry(length, span_len)
    if not 0.0 <= target_rate <= 1.0:
        raise ValueError(f"target_rate must be in [0, 1], got {target_rate}")
    eps = 1e-12
    lo, hi = 0, length - span_len + 1  # rate(hi) == 1.0 exactly
    while lo < hi:
        mid = (lo + hi) // 2
        if expected_mask_rate(length, span_len, mid) >= target_rate - eps:
            hi = mid
        else:
            lo = mid + 1
    return lo


def sample_training_spans(
    length: int,
    span_len: int,
    num_spans: int,
    rng: np.random.Generator,
    circular: bool = False,
) -> np.ndarray:
    """Boolean (length,) row masked by u spans at distinct uniform starts.

    Training uses truncated placement (spans clip at the right edge); the
    circular variant exists to check the placement model behind the closed
    form.
    """
    _check_geometry(length, span_len)
    if not 0 <= num_spans <= length:
        raise ValueError(f"num_spans must be in [0, {length}], got {num_spans}")
    row = np.zeros(length, dtype=bool)
    if num_spans == 0:
        return row
    starts = rng.choice(length, size=num_spans, replace=False)
    for s in starts:
        if circular:
            row[(int(s) + np.arange(span_len)) % length] = True
        else:
            row[int(s) : int(s) + span_len] = True
    return row


@dataclass(frozen=True)
class SpanPartition:
    """Contiguous disjoint spans tiling a region of ``length`` cells.

    Span j covers [j*l, min((j+1)*l, length)); the last span may be short.
    """

    length: int
    span_len: int

    def __post_init__(self) -> None:
        _check_geometry(self.length, self.span_len)

    @property
    def n_spans(self) -> int:
        return -(-self.length // self.span_len)

    def bounds(self, j: int) -> tuple[int, int]:
        if not 0 <= j < self.n_spans:
            raise ValueError(f"span index {j} out of range [0, {self.n_spans})")
        lo = j * self.span_len
        return lo, min(lo + self.span_len, self.length)

    def member_of(self) -> np.ndarray:
        """(length,) array mapping each cell to its span index."""
        return np.arange(self.length) // self.span_len

    def rows_for(self, span_ids: np.ndarray) -> np.ndarray:
        """Boolean (length,) row covering the given span indices."""
        row = np.zeros(self.length, dtype=bool)
        for j in np.asarray(span_ids, dtype=np.int64):
            lo, hi = self.bounds(int(j))
            row[lo:hi] = True
        return row


def span_scores(token_probs: np.ndarray, partition: SpanPartition) -> np.ndarray:
    """Per-span score: the maximum token probability inside each span.

    The decoder fills positions it did not sample this iteration with 0.0;
    spans still masked always have all their positions sampled, so the fill
    never decides a selection.
    """
    token_probs = np.asarray(token_probs, dtype=np.float64)
    if token_probs.shape != (partition.length,):
        raise ValueError(f"token_probs shape {token_probs.shape} != ({partition.length},)")
    if np.any(np.isnan(token_probs)) or token_probs.min() < 0.0 or token_probs.max() > 1.0:
        raise ValueError("token_probs must lie in [0, 1]")
    return np.array(
        [token_probs[lo:hi].max() for lo, hi in map(partition.bounds, range(partition.n_spans))]
    )


def select_spans_to_mask(scores: np.ndarray, fixed: np.ndarray, n_mask: int) -> np.ndarray:
    """Indices (ascending) of the n_mask lowest-scoring spans not yet fixed.

    Fixed spans are excluded outright (treated as +inf).  Ties break toward
    the lower span index, which keeps re-masking deterministic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=bool)
    if scores.ndim != 1 or scores.shape != fixed.shape:
        raise ValueError(f"scores {scores.shape} and fixed {fixed.shape} must be equal 1-D shapes")
    available = int((~fixed).sum())
    if not 0 <= n_mask <= available:
        raise ValueError(f"n_mask must be in [0, {available}] (non-fixed spans), got {n_mask}")
    keyed = np.where(fixed, np.inf, scores)
    order = np.argsort(keyed, kind="stable")
    return np.sort(order[:n_mask])


def _check_geometry(length: int, span_len: int) -> None:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if not 1 <= span_len <= length:
        raise ValueError(f"span_len must be in [1, {length}], got {span_len}")
