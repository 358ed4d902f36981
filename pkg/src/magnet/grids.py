"""Multi-stream token grids, boolean mask grids, and the delayed layout.

A token grid holds K parallel streams ("levels") of T timesteps each, with a
shared per-level vocabulary of size N.  Cell values are 0-based token ids.
Two ids sit above the vocabulary: ``mask_id = N`` marks cells the decoder has
not committed yet, and ``pad_id = N + 1`` appears only in delayed layouts,
never in a plain grid.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

GRID_MAGIC = "MAGNET-GRID"
GRID_VERSION = "v1"


@dataclass
class TokenGrid:
    """A K x T grid of token ids with vocabulary size ``vocab`` per level."""

    vocab: int
    cells: np.ndarray

    def __post_init__(self) -> None:
        if self.vocab < 1:
            raise ValueError(f"vocab must be >= 1, got {self.vocab}")
        cells = np.asarray(self.cells)
        if cells.ndim != 2:
            raise ValueError(f"cells must be 2-D (levels x time), got shape {cells.shape}")
        if cells.shape[0] < 1 or cells.shape[1] < 1:
            raise ValueError(f"grid must have at least one level and one timestep, got {cells.shape}")
        if not np.issubdtype(cells.dtype, np.integer):
            raise ValueError(f"cells must be integers, got dtype {cells.dtype}")
        cells = cells.astype(np.int64, copy=False)
        # mask_id is a legal cell value; pad_id is not (it only exists delayed).
        if cells.min() < 0 or cells.max() > self.mask_id:
            raise ValueError(
                f"cell values must lie in [0, {self.mask_id}] (vocab {self.vocab} plus mask id), "
                f"got range [{cells.min()}, {cells.max()}]"
            )
        self.cells = cells

    @property
    def num_levels(self) -> int:
        return self.cells.shape[0]

    @property
    def length(self) -> int:
        return self.cells.shape[1]

    @property
    def mask_id(self) -> int:
        return self.vocab

    @property
    def pad_id(self) -> int:
        return self.vocab + 1

    def mask(self) -> np.ndarray:
        """Boolean (K, T) array, True where the cell is still masked."""
        return self.cells == self.mask_id

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.vocab, self.cells.copy())


def new_fully_masked(num_levels: int, length: int, vocab: int) -> TokenGrid:
    """Fresh grid with every cell set to the mask id."""
    if num_levels < 1 or length < 1:
        raise ValueError(f"num_levels and length must be >= 1, got {num_levels}, {length}")
    cells = np.full((num_levels, length), vocab, dtype=np.int64)
    return TokenGrid(vocab, cells)


def mask_consistent(grid: TokenGrid, mask: np.ndarray) -> bool:
    """True iff ``mask`` is True exactly where the grid holds the mask id.

    The decode loop maintains this as an invariant at every iteration
    boundary; tests call it between iterations.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != grid.cells.shape:
        raise ValueError(f"mask shape {mask.shape} != grid shape {grid.cells.shape}")
    return bool(np.array_equal(mask, grid.mask()))


@dataclass(frozen=True)
class DelayLayout:
    """Geometry of the delayed layout for K levels of T timesteps.

    Level k (0-based) is shifted right by k steps, so token (k, t) lands in
    delayed column t + k and the layout spans T + K - 1 columns.  Columns a
    level never reaches are padding.
    """

    num_levels: int
    length: int

    def __post_init__(self) -> None:
        if self.num_levels < 1 or self.length < 1:
            raise ValueError(
                f"num_levels and length must be >= 1, got {self.num_levels}, {self.length}"
            )

    @property
    def total_steps(self) -> int:
        return self.length + self.num_levels - 1

    def column_of(self, level: int, t: int) -> int:
        """Delayed column holding token (level, t)."""
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level {level} out of range [0, {self.num_levels})")
        if not 0 <= t < self.length:
            raise ValueError(f"t {t} out of range [0, {self.length})")
        return t + level

    def time_of(self, level: int, column: int) -> int:
        """Undelayed time of (level, column); raises if the slot is padding."""
        if not self.is_valid(level, column):
            raise ValueError(f"(level {level}, column {column}) is a padding slot")
        return column - level

    def is_valid(self, level: int, column: int) -> bool:
        """True iff the slot holds a real token (not padding)."""
        if not 0 <= level < self.num_levels:
            raise ValueError(f"level {level} out of range [0, {self.num_levels})")
        if not 0 <= column < self.total_steps:
            raise ValueError(f"column {column} out of range [0, {self.total_steps})")
        return 0 <= column - level < self.length


def to_delayed(grid: TokenGrid) -> np.ndarray:
    """Delayed (K, T + K - 1) cell array with pad ids in the invalid slots."""
    return delay_cells(grid.cells, grid.pad_id)


def delay_cells(cells: np.ndarray, pad_id: int) -> np.ndarray:
    """Shift row k right by k steps, padding the vacated slots with pad_id.

    Raw-array twin of :func:`to_delayed` for working grids that legitimately
    contain mask ids.
    """
    cells = np.asarray(cells, dtype=np.int64)
    if cells.ndim != 2:
        raise ValueError(f"cells must be 2-D, got shape {cells.shape}")
    k, t = cells.shape
    out = np.full((k, t + k - 1), pad_id, dtype=np.int64)
    for level in range(k):
        out[level, level : level + t] = cells[level]
    return out


def from_delayed(delayed: np.ndarray, vocab: int) -> TokenGrid:
    """Inverse of :func:`to_delayed`; validates the padding pattern."""
    delayed = np.asarray(delayed)
    if delayed.ndim != 2:
        raise ValueError(f"delayed cells must be 2-D, got shape {delayed.shape}")
    k = delayed.shape[0]
    t = delayed.shape[1] - k + 1
    if t < 1:
        raise ValueError(f"delayed layout with {delayed.shape[1]} columns is too short for {k} levels")
    cells = np.empty((k, t), dtype=np.int64)
    pad_id = vocab + 1
    for level in range(k):
        row = delayed[level]
        if np.any(row[:level] != pad_id) or np.any(row[level + t :] != pad_id):
            raise ValueError(f"level {level} has non-padding values in its padding slots")
        cells[level] = row[level : level + t]
    if np.any(cells == pad_id):
        raise ValueError("padding id found in a non-padding slot")
    return TokenGrid(vocab, cells)


def write_grid(grid: TokenGrid, path: str) -> None:
    """Write a grid as text: header line, then one line of ints per level."""
    with open(path, "w", encoding="ascii") as fh:
        _write_grid_stream(grid, fh)


def _write_grid_stream(grid: TokenGrid, fh: io.TextIOBase) -> None:
    fh.write(f"{GRID_MAGIC} {GRID_VERSION} {grid.num_levels} {grid.length} {grid.vocab}\n")
    for level in range(grid.num_levels):
        fh.write(" ".join(str(int(v)) for v in grid.cells[level]))
        fh.write("\n")


def grid_to_text(grid: TokenGrid) -> str:
    buf = io.StringIO()
    _write_grid_stream(grid, buf)
    return buf.getvalue()


def read_grid(path: str) -> TokenGrid:
    """Read a grid written by :func:`write_grid`, validating the format."""
    with open(path, "r", encoding="ascii") as fh:
        return grid_from_text(fh.read())


def grid_from_text(text: str) -> TokenGrid:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise ValueError("empty grid file")
    header = lines[0].split()
    if len(header) != 5 or header[0] != GRID_MAGIC or header[1] != GRID_VERSION:
        raise ValueError(
            f"bad header {lines[0]!r}, expected '{GRID_MAGIC} {GRID_VERSION} K T N'"
        )
    try:
        k, t, n = (int(x) for x in header[2:])
    except ValueError as exc:
        raise ValueError(f"non-integer dimensions in header {lines[0]!r}") from exc
    if len(lines) - 1 != k:
        raise ValueError(f"expected {k} level rows, found {len(lines) - 1}")
    cells = np.empty((k, t), dtype=np.int64)
    for level, line in enumerate(lines[1:]):
        fields = line.split()
        if len(fields) != t:
            raise ValueError(f"level {level} has {len(fields)} values, expected {t}")
        try:
            cells[level] = [int(f) for f in fields]
        except ValueError as exc:
            raise ValueError(f"non-integer token on level {level}") from exc
    if cells.min() < 0 or cells.max() > n:
        raise ValueError(
            f"token ids must lie in [0, {n}] (vocab {n} plus mask id), "
            f"got range [{cells.min()}, {cells.max()}]"
        )
    return TokenGrid(n, cells)
