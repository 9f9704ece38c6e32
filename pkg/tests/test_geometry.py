import time

import numpy as np
import pytest
from hypothesis import given, strategies as st

from psrpn.anchors import (EXPECTED_640, anchor_audit, brute_force_counts, default_profile, generate_anchors,
                           generate_grid_anchors, generate_window_anchors, iou, iou_matrix)
from psrpn.pspool import (decode_box, decode_boxes, encode_box, encode_boxes, filter_image_bounds, grid_bins,
                          inside_image, partition_bins, ps_pool, ps_pool_level)
from psrpn.tensor import ShapeError, Tensor

STRIDES = (4, 8, 16, 32, 64)


def test_window_counts_640():
    t0 = time.perf_counter()
    a = generate_window_anchors((640, 640), STRIDES)
    assert a.counts() == EXPECTED_640["window"] == (194_058, 27_803, 5_963, 1_043, 83)
    assert len(a) == 228_950
    assert time.perf_counter() - t0 < 5


@pytest.mark.parametrize("mode,total", [("grid3", 102_300), ("grid5", 170_500)])
def test_grid_counts_640(mode, total):
    a = generate_anchors((640, 640), STRIDES, mode)
    assert len(a) == total
    assert a.counts() == EXPECTED_640[mode]


@given(st.integers(1, 12), st.integers(1, 12), st.integers(0, 4))
def test_window_count_formula_vs_enumeration(fh, fw, lvl):
    s = 4
    profile = [[(w, h) for w in range(1, 6) for h in range(1, 6)]]
    a = generate_window_anchors((fh * s, fw * s), (s,), profile)
    brute = sum(1 for w, h in profile[0] for r in range(fh) for c in range(fw) if r + h <= fh and c + w <= fw)
    assert len(a) == brute


@pytest.mark.parametrize("size", [64, 128, 192])
@pytest.mark.parametrize("mode", ["window", "grid3", "grid5"])
def test_audit_matches_brute_force(size, mode):
    counts, expected = anchor_audit(size, mode)
    assert counts == expected == brute_force_counts(size, mode)


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from([(4, 8, 16), (8, 16, 32, 64), STRIDES]))
def test_window_anchors_inside_image(mh, mw, strides):
    h, w = 64 * mh, 64 * mw
    a = generate_window_anchors((h, w), strides)
    assert inside_image(a.boxes, (h, w)).all()
    # window mapping: size (w*s) x (h*s) at the top-left cell
    s = np.asarray(strides)[a.level]
    np.testing.assert_array_equal(a.boxes[:, 2] - a.boxes[:, 0], a.win_w * s)
    np.testing.assert_array_equal(a.boxes[:, 0], a.col * s)


def test_grid_anchor_geometry():
    a = generate_grid_anchors((128, 128), STRIDES, 3)
    s = np.asarray(STRIDES)[a.level]
    area = (a.boxes[:, 2] - a.boxes[:, 0]) * (a.boxes[:, 3] - a.boxes[:, 1])
    np.testing.assert_allclose(area, (8 * s) ** 2)
    np.testing.assert_allclose((a.boxes[:, 0] + a.boxes[:, 2]) / 2, (a.col + 0.5) * s)
    # (level, row, col, ratio) order
    key = ((a.level * 1000 + a.row) * 1000 + a.col) * 10 + a.shape
    assert np.all(np.diff(key) > 0)


def test_profile_shape():
    p = default_profile()
    assert len(p[0]) == 8 and len(p[1]) == 5 and len(p[4]) == 10


def brute_iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def random_boxes(rng, n, size=100.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(1, size / 2, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def test_iou_matrix_vs_scalar(rng):
    a, b = random_boxes(rng, 12), random_boxes(rng, 9)
    m = iou_matrix(a, b)
    for i in range(12):
        for j in range(9):
            assert m[i, j] == pytest.approx(brute_iou(a[i], b[j]), abs=1e-12)
    assert iou(a[0], a[0]) == pytest.approx(1.0)


@pytest.mark.parametrize("side", range(1, 25))
def test_partition_tiles_window_exactly(side):
    bins = partition_bins(side, 4)
    assert bins[0][0] == 0 and bins[-1][1] == side
    assert all(b[0] == a[1] for a, b in zip(bins, bins[1:]))
    lo, hi = grid_bins(side, 4)
    assert np.all(hi > lo)


def test_partition_covers_every_profile_window():
    for windows in default_profile():
        for w, h in windows:
            for side in (w, h):
                cover = np.zeros(side, int)
                for lo, hi in partition_bins(side, 4):
                    cover[lo:hi] += 1
                assert np.all(cover == 1), (w, h)
                if side >= 4:
                    lo, hi = grid_bins(side, 4)
                    assert [tuple(x) for x in zip(lo, hi)] == partition_bins(side, 4)


def naive_ps_pool(reg, cls, row, col, w, h, k):
    ys, xs = partition_bins(h, k), partition_bins(w, k)
    o, t = 0.0, np.zeros(4)
    for gy in range(k):
        for gx in range(k):
            y0, y1 = ys[gy]
            x0, x1 = xs[gx]
            if y1 == y0 or x1 == x0:
                lo, hi = grid_bins(h, k)
                y0, y1 = lo[gy], hi[gy]
                lo, hi = grid_bins(w, k)
                x0, x1 = lo[gx], hi[gx]
            g = gy * k + gx
            region = (slice(row + y0, row + y1), slice(col + x0, col + x1))
            o += cls[g][region].mean()
            for c in range(4):
                t[c] += reg[c * k * k + g][region].mean()
    return t / (k * k), o / (k * k)


def test_ps_pool_matches_naive(rng):
    k = 4
    reg = rng.standard_normal((4 * k * k, 14, 15))
    cls = rng.standard_normal((k * k, 14, 15))
    for w, h in [(8, 8), (4, 8), (3, 9), (12, 4), (2, 4), (1, 1), (5, 7)]:
        row, col = int(rng.integers(0, 15 - h)), int(rng.integers(0, 16 - w))
        res = ps_pool(reg[None], cls[None], (row, col, w, h), k)
        t, o = naive_ps_pool(reg, cls, row, col, w, h, k)
        np.testing.assert_allclose(res.t, t, atol=1e-10)
        assert res.o == pytest.approx(o, abs=1e-10)
        assert 0 < res.score < 1


def test_ps_pool_rejects_out_of_map_window():
    with pytest.raises(ShapeError):
        ps_pool_level(Tensor(np.zeros((1, 64, 4, 4))), Tensor(np.zeros((1, 16, 4, 4))), [0], [2], [0], [2], [3], 4)


def test_ps_pool_constant_maps():
    k = 4
    reg = np.concatenate([np.full((k * k, 6, 6), v) for v in (0.1, -0.2, 0.3, 0.4)])
    cls = np.full((k * k, 6, 6), 1.5)
    res = ps_pool(reg[None], cls[None], (1, 1, 4, 5), k)
    np.testing.assert_allclose(res.t, [0.1, -0.2, 0.3, 0.4])
    assert res.o == pytest.approx(1.5)


def test_encode_decode_round_trip_1e5(rng):
    n = 100_000
    anchors = random_boxes(rng, n, 600)
    gts = random_boxes(rng, n, 600)
    back = decode_boxes(anchors, encode_boxes(anchors, gts))
    assert np.abs(back - gts).max() < 1e-4


@given(st.lists(st.floats(1, 500), min_size=8, max_size=8))
def test_encode_decode_property(vals):
    a = np.array([vals[0], vals[1], vals[0] + vals[2], vals[1] + vals[3]])
    g = np.array([vals[4], vals[5], vals[4] + vals[6], vals[5] + vals[7]])
    np.testing.assert_allclose(decode_box(a, encode_box(a, g)), g, atol=1e-4)


def test_identity_offsets_decode_to_anchor():
    a = np.array([[10.0, 20.0, 50.0, 40.0]])
    np.testing.assert_allclose(decode_boxes(a, np.zeros((1, 4))), a)
    np.testing.assert_allclose(encode_boxes(a, a), 0, atol=1e-15)


def test_decode_clamps_large_scales():
    stats = {}
    out = decode_boxes(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([[0.0, 0.0, 50.0, -50.0]]), stats)
    assert stats["clamped"] == 2
    assert np.all(np.isfinite(out))
    assert out[0, 2] - out[0, 0] == pytest.approx(np.exp(8.0))


def test_filter_image_bounds(rng):
    boxes = random_boxes(rng, 200, 150)
    scores = rng.random(200)
    kept, ks = filter_image_bounds(boxes, (100, 120), scores)
    assert len(kept) <= len(boxes)
    assert np.all(kept[:, 0] >= 0) and np.all(kept[:, 2] <= 120) and np.all(kept[:, 3] <= 100)
    manual = [i for i, b in enumerate(boxes) if b[0] >= 0 and b[1] >= 0 and b[2] <= 120 and b[3] <= 100]
    np.testing.assert_array_equal(ks, scores[manual])
