"""Side-by-side result grids: ground truth | occluded | inpainted, one row per sample."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .data import save_image

GAP = 2


def make_grid(rows: Sequence[tuple]) -> np.ndarray:
    """Tile (y, x, y_hat) triples into one C x H' x W' image with white 2-px gaps."""
    if len(rows) == 0:
        raise ValueError("make_grid needs at least one sample")
    tiles = [[np.clip(np.asarray(t, dtype=np.float64), 0, 1) for t in row] for row in rows]
    shape = tiles[0][0].shape
    for row in tiles:
        if len(row) != 3 or any(t.shape != shape for t in row):
            raise ValueError(f"every row must hold three images of shape {shape}")
    c, h, w = shape
    n = len(tiles)
    grid = np.ones((c, n * h + GAP * (n - 1), 3 * w + GAP * 2))
    for i, row in enumerate(tiles):
        top = i * (h + GAP)
        for j, tile in enumerate(row):
            left = j * (w + GAP)
            grid[:, top : top + h, left : left + w] = tile
    return grid


def export_grid(rows: Sequence[tuple], path) -> np.ndarray:
    """Write the grid as PGM or PNG (chosen by extension); returns the grid array."""
    grid = make_grid(rows)
    save_image(Path(path), grid)
    return grid
