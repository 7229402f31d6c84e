"""Side-by-side image grids for eyeballing training progress.

A grid is rows of equally sized uint8 tiles: typically source images on
top, their adapted versions below, and optionally the nearest target
neighbors as a third row. Grayscale tiles are replicated to RGB so one PPM
can hold mixed rows; a 1-pixel separator keeps tiles readable.
"""

from __future__ import annotations

import numpy as np

from .formats import write_pnm

SEPARATOR = 32  # dark gray border


def _to_rgb(tile):
    tile = np.asarray(tile)
    if tile.ndim == 2:
        tile = tile[..., None]
    if tile.dtype == np.uint16:
        # depth maps: squash the full 16-bit range into display range
        tile = (tile.astype(np.float64) / 257.0).round().astype(np.uint8)
    if tile.dtype != np.uint8:
        raise ValueError(f"grid tiles must be uint8/uint16, got {tile.dtype}")
    if tile.shape[2] == 1:
        tile = np.repeat(tile, 3, axis=2)
    elif tile.shape[2] == 4:
        # RGB + depth: show color only
        tile = tile[:, :, :3]
    elif tile.shape[2] != 3:
        raise ValueError(f"cannot render {tile.shape[2]}-channel tiles")
    return tile


def assemble_grid(rows):
    """rows: list of (N,H,W[,C]) uint8 stacks -> one (GH,GW,3) uint8 image."""
    if not 1 <= len(rows) <= 3:
        raise ValueError(f"a grid has 1 to 3 rows, got {len(rows)}")
    counts = {len(r) for r in rows}
    if len(counts) != 1:
        raise ValueError(f"rows disagree on tile count: {sorted(counts)}")
    tiles = [[_to_rgb(img) for img in row] for row in rows]
    shapes = {t.shape for row in tiles for t in row}
    if len(shapes) != 1:
        raise ValueError(f"tiles disagree on shape: {sorted(shapes)}")
    h, w, _ = next(iter(shapes))
    n = len(tiles[0])
    gh = len(rows) * h + (len(rows) - 1)
    gw = n * w + (n - 1)
    grid = np.full((gh, gw, 3), SEPARATOR, dtype=np.uint8)
    for r, row in enumerate(tiles):
        for c, tile in enumerate(row):
            top, left = r * (h + 1), c * (w + 1)
            grid[top : top + h, left : left + w] = tile
    return grid


def write_grid(path, grid):
    write_pnm(path, grid)
