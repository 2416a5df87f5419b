import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from recongen.tiling import plan_tiles, stitch


def brute_stitch(tiles, layout):
    """Per-pixel oracle: collect every (weight, value) a pixel receives."""
    H, W = layout.height, layout.width
    out = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for k, (i, j), (r, c) in layout.tiles():
                if r <= y < r + layout.tile_h and c <= x < c + layout.tile_w:
                    acc += layout.row_weights[i][y - r] * layout.col_weights[j][x - c] * tiles[k][y - r, x - c]
            out[y, x] = acc
    return out


def test_single_tile():
    lay = plan_tiles(256, 256)
    assert lay.grid == (1, 1)
    assert np.array_equal(lay.weight(0, 0), np.ones((256, 256)))


def test_w480_interval_assignment():
    lay = plan_tiles(256, 480)
    assert lay.cols == (0, 224)
    w0, w1 = lay.col_weights
    g = np.arange(480)
    # global column -> (weight from tile 0, weight from tile 1)
    from0 = np.zeros(480)
    from1 = np.zeros(480)
    from0[:256] = w0
    from1[224:] = w1
    assert np.all(from0[:224] == 1) and np.all(from1[:224] == 0)
    assert np.all(from0[224:236] == 1) and np.all(from1[224:236] == 0)
    assert np.all(from0[236:244] == 0.5) and np.all(from1[236:244] == 0.5)
    assert np.all(from0[244:256] == 0) and np.all(from1[244:256] == 1)
    assert np.all(from1[256:] == 1)
    assert np.array_equal(from0 + from1, np.ones_like(g, dtype=float))


def test_regular_overlap_is_12_8_12():
    lay = plan_tiles(256, 256 + 224 * 2)
    assert lay.cols == (0, 224, 448)
    mid = lay.col_weights[1]
    assert np.all(mid[:12] == 0) and np.all(mid[12:20] == 0.5) and np.all(mid[20:236] == 1)
    assert np.all(mid[236:244] == 0.5) and np.all(mid[244:] == 0)


def test_edge_tiles_keep_borders():
    lay = plan_tiles(600, 700)
    assert lay.row_weights[0][0] == 1 and lay.row_weights[-1][-1] == 1
    assert lay.col_weights[0][0] == 1 and lay.col_weights[-1][-1] == 1
    assert lay.rows[-1] + 256 == 600 and lay.cols[-1] + 256 == 700


def test_corner_crossing_averages_four_tiles():
    lay = plan_tiles(480, 480)
    counts = np.zeros((480, 480))
    for _, (i, j), (r, c) in lay.tiles():
        counts[r:r + 256, c:c + 256] += lay.weight(i, j) > 0
    assert counts[240, 240] == 4
    wsum = sum(lay.weight(i, j)[240 - r, 240 - c] for _, (i, j), (r, c) in lay.tiles())
    assert wsum == 1.0 and lay.weight(0, 0)[240, 240] == 0.25


@given(st.integers(1, 1024), st.integers(1, 1024))
@settings(max_examples=50, deadline=None)
def test_partition_of_unity_random_sizes(H, W):
    lay = plan_tiles(H, W)
    assert np.all(lay.weight_map() == 1.0)


@given(st.integers(1, 700), st.integers(1, 700), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_round_trip_exact(H, W, seed):
    img = np.random.default_rng(seed).standard_normal((H, W, 2))
    lay = plan_tiles(H, W)
    assert np.array_equal(stitch(lay.cut(img), lay), img)


@given(st.integers(8, 80), st.integers(8, 80), st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_small_tiles_any_overlap(H, W, seed):
    lay = plan_tiles(H, W, tile=16, overlap=5, blend=2)
    assert np.all(lay.weight_map() == 1.0)
    img = np.random.default_rng(seed).random((H, W))
    assert np.array_equal(stitch(lay.cut(img), lay), img)


def test_constant_tiles():
    lay = plan_tiles(300, 520)
    out = stitch([np.full((256, 256, 3), 0.3)] * len(lay), lay)
    assert np.array_equal(out, np.full((300, 520, 3), 0.3))


def test_random_tiles_match_per_pixel_oracle():
    lay = plan_tiles(40, 52, tile=16, overlap=6, blend=2)
    rng = np.random.default_rng(0)
    tiles = [rng.standard_normal((16, 16)) for _ in range(len(lay))]
    ref = brute_stitch(tiles, lay)
    assert np.allclose(stitch(tiles, lay), ref, rtol=0, atol=1e-15)
    # two-tile band pixels are the arithmetic mean of the contributing tiles
    lay2 = plan_tiles(16, 26, tile=16, overlap=6, blend=2)
    t = [rng.standard_normal((16, 16)) for _ in range(2)]
    out = stitch(t, lay2)
    band = [x for x in range(26) if 0 < lay2.col_weights[0][min(x, 15)] < 1 and x < 16]
    for x in band:
        assert np.allclose(out[:, x], (t[0][:, x] + t[1][:, x - 10]) / 2)


def test_stitch_is_order_independent():
    lay = plan_tiles(500, 500)
    rng = np.random.default_rng(1)
    tiles = [rng.standard_normal((256, 256)) for _ in range(len(lay))]
    out = stitch(tiles, lay)
    # producing tiles in reverse order then placing them by index gives the same field
    produced = {k: tiles[k] for k in reversed(range(len(lay)))}
    assert np.array_equal(stitch([produced[k] for k in range(len(lay))], lay), out)


def test_errors():
    with pytest.raises(ValueError):
        plan_tiles(300, 300, tile=32, overlap=32)
    lay = plan_tiles(300, 300)
    with pytest.raises(ValueError):
        stitch([np.zeros((256, 256))] * (len(lay) - 1), lay)
    with pytest.raises(ValueError):
        stitch([np.zeros((255, 256))] * len(lay), lay)


def test_small_image_single_tile():
    lay = plan_tiles(100, 300)
    assert lay.tile_h == 100 and len(lay.rows) == 1 and len(lay.cols) == 2
    img = np.random.default_rng(0).random((100, 300))
    assert np.array_equal(stitch(lay.cut(img), lay), img)
