"""Boolean attention masks: full, causal, restricted, and hybrid variants.

Masks are (queries, keys) boolean arrays where True means "query may attend
key".  ``hybrid_mask`` operates on one level's row of the delayed layout;
``fused_hybrid_mask`` is the trunk mask of the fused model that embeds all
levels of the delayed layout plus a leading BOS slot.
"""

from __future__ import annotations

import numpy as np

from .pgm import write_pgm


def full_mask(length: int) -> np.ndarray:
    """Everything attends everything."""
    _check_length(length)
    return np.ones((length, length), dtype=bool)


def causal_mask(length: int) -> np.ndarray:
    """Query i attends keys j <= i."""
    _check_length(length)
    return np.tril(np.ones((length, length), dtype=bool))


def restricted_mask(length: int, window: int) -> np.ndarray:
    """Query i attends keys j with |i - j| <= window.

    Interior rows (at least ``window`` away from both edges) have exactly
    2 * window + 1 allowed keys.
    """
    _check_length(length)
    if window < 0:
        raise ValueError(f"window must be >= 0, got {window}")
    idx = np.arange(length)
    return np.abs(idx[:, None] - idx[None, :]) <= window


def hybrid_mask(length: int, num_levels: int, level: int, t_switch: int) -> np.ndarray:
    """Mask for one level's row of the delayed layout, split at ``t_switch``.

    The row spans T' = length + num_levels - 1 delayed columns; level k's
    token for time t sits at column t + k, and columns outside [k, k+length)
    are padding.  Queries whose undelayed time is below ``t_switch`` attend
    causally (non-padding keys at or before them); queries at or beyond it
    attend every non-padding key.  Padding slots attend only themselves and
    are attended by nothing else.
    """
    _check_length(length)
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    if not 0 <= level < num_levels:
        raise ValueError(f"level {level} out of range [0, {num_levels})")
    total = length + num_levels - 1
    if not 0 <= t_switch <= total:
        raise ValueError(f"t_switch must be in [0, {total}], got {t_switch}")
    cols = np.arange(total)
    valid = (cols >= level) & (cols < level + length)
    out = np.zeros((total, total), dtype=bool)
    for q in range(total):
        if not valid[q]:
            out[q, q] = True
            continue
        if q - level < t_switch:
            out[q] = valid & (cols <= q)
        else:
            out[q] = valid
    return out


def fused_hybrid_mask(
    length: int,
    num_levels: int,
    t_switch: int,
    window: int | None = None,
) -> np.ndarray:
    """Trunk mask for the fused delayed-layout model with a BOS slot.

    Positions: p = 0 is BOS; position p >= 1 carries delayed column p - 1 as
    input; position p predicts delayed column p.  A column is autoregressive
    iff it still contains a token whose undelayed time is below ``t_switch``,
    i.e. columns 0 .. t_switch + K - 2 (empty when t_switch == 0).  Queries
    predicting an autoregressive column attend causally (keys <= themselves);
    the remaining, parallel queries attend BOS, every input from the
    autoregressive region, and keys within ``window`` positions of themselves
    (all keys when ``window`` is None).
    """
    _check_length(length)
    if num_levels < 1:
        raise ValueError(f"num_levels must be >= 1, got {num_levels}")
    if window is not None and window < 0:
        raise ValueError(f"window must be >= 0 or None, got {window}")
    total_cols = length + num_levels - 1
    if not 0 <= t_switch <= length:
        raise ValueError(f"t_switch must be in [0, {length}], got {t_switch}")
    size = total_cols + 1
    n_ar_cols = 0 if t_switch == 0 else min(t_switch + num_levels - 1, total_cols)
    pos = np.arange(size)
    out = np.zeros((size, size), dtype=bool)
    for q in range(size):
        if q < n_ar_cols:
            out[q] = pos <= q
        else:
            allowed = pos == 0
            allowed |= (pos >= 1) & (pos - 1 < n_ar_cols)
            if window is None:
                allowed |= np.ones(size, dtype=bool)
            else:
                allowed |= np.abs(pos - q) <= window
            out[q] = allowed
    return out


def mask_to_pgm(mask: np.ndarray, path: str) -> None:
    """Export a boolean mask as a P2 PGM image; allowed cells render dark."""
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.dtype != bool:
        raise ValueError(f"mask must be a 2-D boolean array, got {mask.dtype} {mask.shape}")
    write_pgm(np.where(mask, 0, 255).astype(np.uint8), path)


def _check_length(length: int) -> None:
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
