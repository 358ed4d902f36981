"""Minimal plain-text PGM (P2) writing, shared by mask and trace exports."""

from __future__ import annotations

import numpy as np


def write_pgm(values: np.ndarray, path: str) -> None:
    """Write a 2-D uint8 array as a plain (ASCII, P2) PGM image."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PGM image must be 2-D, got shape {values.shape}")
    if values.dtype != np.uint8:
        if np.issubdtype(values.dtype, np.integer) and values.min() >= 0 and values.max() <= 255:
            values = values.astype(np.uint8)
        else:
            raise ValueError("PGM values must be integers in [0, 255]")
    h, w = values.shape
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"P2\n{w} {h}\n255\n")
        for row in values:
            fh.write(" ".join(str(int(v)) for v in row))
            fh.write("\n")


def read_pgm(path: str) -> np.ndarray:
    """Read back a plain P2 PGM written by :func:`write_pgm`."""
    with open(path, "r", encoding="ascii") as fh:
        tokens = fh.read().split()
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a plain (P2) PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"expected maxval 255, got {maxval}")
    data = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if data.size != w * h:
        raise ValueError(f"expected {w * h} samples, found {data.size}")
    if data.min() < 0 or data.max() > 255:
        raise ValueError("sample out of range [0, 255]")
    return data.reshape(h, w).astype(np.uint8)
