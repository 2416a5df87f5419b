"""Overlapping tile layout and hard-average stitching.

Neighbouring tiles share an overlap of (nominally) 32 pixels.  Inside each
overlap the first 12 pixels are taken from the earlier tile only, the last
12 from the later tile only, and the central 8-pixel band is the average
of both.  Edge tiles are shifted inward to abut the image border; their
larger overlap keeps the 8-pixel band centred and splits the rest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TileLayout:
    height: int
    width: int
    tile: int
    overlap: int
    blend: int
    rows: tuple  # tile origins along y
    cols: tuple  # tile origins along x
    row_weights: tuple  # per-row-tile 1-D weight profile over the tile
    col_weights: tuple

    @property
    def tile_h(self) -> int:
        return min(self.tile, self.height)

    @property
    def tile_w(self) -> int:
        return min(self.tile, self.width)

    @property
    def grid(self) -> tuple:
        return len(self.rows), len(self.cols)

    def __len__(self) -> int:
        return len(self.rows) * len(self.cols)

    def tiles(self):
        """Yield ``(index, (i, j), (y0, x0))`` in row-major order."""
        k = 0
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                yield k, (i, j), (r, c)
                k += 1

    def weight(self, i: int, j: int) -> np.ndarray:
        return np.outer(self.row_weights[i], self.col_weights[j])

    def weight_map(self) -> np.ndarray:
        """Per-pixel sum of stitch weights (all ones for a valid layout)."""
        acc = np.zeros((self.height, self.width))
        for _, (i, j), (r, c) in self.tiles():
            acc[r:r + self.tile_h, c:c + self.tile_w] += self.weight(i, j)
        return acc

    def cut(self, image):
        """Extract every tile of ``image`` (``(H, W, ...)``) in layout order."""
        return [image[r:r + self.tile_h, c:c + self.tile_w] for _, _, (r, c) in self.tiles()]


def _origins(length: int, tile: int, stride: int) -> list:
    if length <= tile:
        return [0]
    pos = [0]
    while pos[-1] + tile < length:
        pos.append(min(pos[-1] + stride, length - tile))
    return pos


def _profiles(origins, size, blend):
    """1-D weights per tile: 1 where kept alone, 0.5 on shared bands, 0 discarded."""
    n = len(origins)
    lo = [0] * n       # first kept offset within tile
    hi = [size] * n    # one past last kept offset
    band_lo = [None] * n
    band_hi = [None] * n
    for k in range(n - 1):
        ov = origins[k] + size - origins[k + 1]
        b = min(blend, ov)
        first = (ov - b) // 2
        start = origins[k + 1] + first        # global start of averaged band
        hi[k] = start + b - origins[k]
        band_hi[k] = (start - origins[k], start + b - origins[k])
        lo[k + 1] = start - origins[k + 1]
        band_lo[k + 1] = (start - origins[k + 1], start + b - origins[k + 1])
    prof = []
    for k in range(n):
        w = np.zeros(size)
        w[lo[k]:hi[k]] = 1.0
        for band in (band_lo[k], band_hi[k]):
            if band is not None:
                w[band[0]:band[1]] = 0.5
        prof.append(w)
    return tuple(prof)


def plan_tiles(H: int, W: int, tile: int = 256, overlap: int = 32, blend: int = 8) -> TileLayout:
    """Tile origins on a ``tile - overlap`` stride with edge-aligned last tiles.

    A side no longer than ``tile`` is covered by a single tile spanning it.
    """
    if overlap >= tile:
        raise ValueError(f"overlap {overlap} must be smaller than tile {tile}")
    if overlap < 0 or blend < 0 or H < 1 or W < 1:
        raise ValueError("sizes must be positive")
    if tile < overlap + 2 * min(blend, overlap):
        raise ValueError("tile too small for its overlap and blend band")
    stride = tile - overlap
    rows, cols = _origins(H, tile, stride), _origins(W, tile, stride)
    th, tw = min(tile, H), min(tile, W)
    layout = TileLayout(H, W, tile, overlap, blend, tuple(rows), tuple(cols),
                        _profiles(rows, th, blend), _profiles(cols, tw, blend))
    for axis_len, origins, prof, size in ((H, rows, layout.row_weights, th),
                                          (W, cols, layout.col_weights, tw)):
        acc = np.zeros(axis_len)
        for o, w in zip(origins, prof):
            acc[o:o + size] += w
        if not np.all(acc == 1.0):
            raise ValueError("tile weights do not partition the image; increase tile size")
    return layout


def stitch(tiles, layout: TileLayout) -> np.ndarray:
    """Assemble per-tile arrays into the full image using the layout weights.

    Accumulation follows layout order, so the result does not depend on
    the order in which tiles were produced.
    """
    tiles = list(tiles)
    if len(tiles) != len(layout):
        raise ValueError(f"expected {len(layout)} tiles, got {len(tiles)}")
    first = np.asarray(tiles[0])
    out = np.zeros((layout.height, layout.width) + first.shape[2:], dtype=np.float64)
    for k, (i, j), (r, c) in layout.tiles():
        t = np.asarray(tiles[k], dtype=np.float64)
        if t.shape[:2] != (layout.tile_h, layout.tile_w) or t.shape[2:] != first.shape[2:]:
            raise ValueError(f"tile {k} has shape {t.shape}")
        w = layout.weight(i, j)
        if t.ndim == 3:
            w = w[..., None]
        out[r:r + layout.tile_h, c:c + layout.tile_w] += w * t
    return out
