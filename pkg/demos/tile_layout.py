"""
How an image is cut into tiles and stitched back
================================================

Tiles of 256 px sit on a 224 px stride; the last tile is pushed back to
the image edge.  Inside each overlap the 12 px nearest a tile's own edge
are discarded, the central 8 px are averaged, and the rest is owned by one
tile, so the weights at every pixel sum to exactly one.

Run:  python demos/tile_layout.py
"""

import numpy as np

from recongen import plan_tiles, stitch

layout = plan_tiles(256, 480)
print("column origins:", layout.cols)

w0, w1 = layout.col_weights
overlap = np.arange(layout.cols[1], 256)
print("overlap columns", overlap[0], "to", overlap[-1])
for name, mask in (("left tile only", (w0[overlap] == 1)),
                   ("averaged", (w0[overlap] == 0.5)),
                   ("right tile only", (w1[overlap - layout.cols[1]] == 1))):
    print(f"  {name:16s} {mask.sum():3d} px")

# %%
# Cutting an image and stitching the unchanged tiles returns it bit for bit.

img = np.random.default_rng(0).random((300, 700, 3))
layout = plan_tiles(*img.shape[:2])
print("grid", layout.grid, "weight sum range",
      layout.weight_map().min(), layout.weight_map().max())
print("round trip exact:", np.array_equal(stitch(layout.cut(img), layout), img))
