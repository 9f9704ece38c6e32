"""Position-sensitive pooling over anchor windows, and box coding.

Score-map channel layout: ``cls`` holds k*k channels, grid-major (grid g =
row * k + col inside the window). ``reg`` holds four blocks of k*k channels,
coordinate-major: channel ``c * k*k + g`` carries coordinate c of grid g.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, _make, _stable_sigmoid, as_tensor

log = logging.getLogger(__name__)

MAX_LOG_SCALE = 8.0


@dataclass
class PSPoolResult:
    t: np.ndarray  # (tx, ty, tw, th)
    o: float
    score: float


@lru_cache(maxsize=None)
def grid_bins(side, k):
    """Half-open ``(lo, hi)`` cell ranges of the k bins along one window side.

    Edges are ``round(i * side / k)``; a bin that collapses to nothing
    reuses its nearest non-empty neighbour (the lower one on ties).
    """
    edges = [int(np.floor(i * side / k + 0.5)) for i in range(k + 1)]
    lo, hi = edges[:-1], edges[1:]
    empty = [a == b for a, b in zip(lo, hi)]
    out_lo, out_hi = list(lo), list(hi)
    for i in range(k):
        if not empty[i]:
            continue
        for d in range(1, k):
            j = next((j for j in (i - d, i + d) if 0 <= j < k and not empty[j]), None)
            if j is not None:
                out_lo[i], out_hi[i] = lo[j], hi[j]
                break
    return np.array(out_lo), np.array(out_hi)


def partition_bins(side, k):
    """The raw (pre-borrowing) bin ranges; they tile ``[0, side)`` exactly."""
    edges = [int(np.floor(i * side / k + 0.5)) for i in range(k + 1)]
    return list(zip(edges[:-1], edges[1:]))


def _window_regions(row, col, win_w, win_h, k):
    """Per anchor and grid, the cell rectangle ``(y0, x0, y1, x1)``; each (M, k*k)."""
    m = len(row)
    y0 = np.empty((m, k), np.int64)
    y1 = np.empty((m, k), np.int64)
    x0 = np.empty((m, k), np.int64)
    x1 = np.empty((m, k), np.int64)
    for h in np.unique(win_h):
        sel = win_h == h
        lo, hi = grid_bins(int(h), k)
        y0[sel] = row[sel, None] + lo
        y1[sel] = row[sel, None] + hi
    for w in np.unique(win_w):
        sel = win_w == w
        lo, hi = grid_bins(int(w), k)
        x0[sel] = col[sel, None] + lo
        x1[sel] = col[sel, None] + hi
    gy = np.repeat(np.arange(k), k)
    gx = np.tile(np.arange(k), k)
    return y0[:, gy], x0[:, gx], y1[:, gy], x1[:, gx]


def _integral(x):
    n, c, h, w = x.shape
    s = np.zeros((n, c, h + 1, w + 1), dtype=np.float64)
    np.cumsum(np.cumsum(x, axis=2, dtype=np.float64), axis=3, out=s[:, :, 1:, 1:])
    return s


def _box_means(sat, img, chan, y0, x0, y1, x1):
    """Mean of each rectangle through the summed-area table; all index arrays share a shape."""
    total = sat[img, chan, y1, x1] - sat[img, chan, y0, x1] - sat[img, chan, y1, x0] + sat[img, chan, y0, x0]
    return total / ((y1 - y0) * (x1 - x0))


def _scatter_box_grad(shape, img, chan, y0, x0, y1, x1, g):
    """Gradient w.r.t. the map of ``sum(g * box_mean)``."""
    n, c, h, w = shape
    g = g / ((y1 - y0) * (x1 - x0))
    hp, wp = h + 1, w + 1
    base = (img * c + chan) * hp
    flat = np.concatenate([
        ((base + y1) * wp + x1).ravel(), ((base + y0) * wp + x1).ravel(),
        ((base + y1) * wp + x0).ravel(), ((base + y0) * wp + x0).ravel(),
    ])
    weights = np.concatenate([g.ravel(), -g.ravel(), -g.ravel(), g.ravel()])
    dsat = np.bincount(flat, weights=weights, minlength=n * c * hp * wp).reshape(n, c, hp, wp)
    d = dsat[:, :, 1:, 1:][:, :, ::-1, ::-1]
    return np.cumsum(np.cumsum(d, axis=2), axis=3)[:, :, ::-1, ::-1]


def ps_pool_level(reg, cls, img, row, col, win_w, win_h, k):
    """Position-sensitive pooling for many anchors on one level.

    Returns ``(t, o)`` tensors of shape (M, 4) and (M,): every grid averages
    its own channel over its cell region, then the k*k grid values are
    averaged.
    """
    reg, cls = as_tensor(reg), as_tensor(cls)
    kk = k * k
    if cls.shape[1] != kk or reg.shape[1] != 4 * kk:
        raise ShapeError(f"expected {4 * kk}/{kk} reg/cls channels, got {reg.shape[1]}/{cls.shape[1]}")
    img, row, col = (np.asarray(a, np.int64) for a in (img, row, col))
    win_w, win_h = np.asarray(win_w, np.int64), np.asarray(win_h, np.int64)
    h, w = cls.shape[2:]
    if len(row) and (row.min() < 0 or col.min() < 0 or (row + win_h).max() > h or (col + win_w).max() > w):
        raise ShapeError("anchor window lies outside the score map")
    y0, x0, y1, x1 = _window_regions(row, col, win_w, win_h, k)
    m = len(row)
    gidx = np.broadcast_to(np.arange(kk), (m, kk))
    ii = np.broadcast_to(img[:, None], (m, kk))
    cls_vals = _box_means(_integral(cls.data), ii, gidx, y0, x0, y1, x1)
    o = cls_vals.mean(axis=1)
    reg_sat = _integral(reg.data)
    t = np.stack(
        [_box_means(reg_sat, ii, gidx + c * kk, y0, x0, y1, x1).mean(axis=1) for c in range(4)], axis=1
    )
    dtype = cls.dtype

    def backward_o(g):
        gg = np.broadcast_to(g[:, None] / kk, (m, kk))
        return None, _scatter_box_grad(cls.shape, ii, gidx, y0, x0, y1, x1, gg).astype(dtype)

    def backward_t(g):
        ch = np.concatenate([gidx + c * kk for c in range(4)], axis=1)
        rep = lambda a: np.concatenate([a] * 4, axis=1)  # noqa: E731
        gg = np.concatenate([np.broadcast_to(g[:, c : c + 1] / kk, (m, kk)) for c in range(4)], axis=1)
        gr = _scatter_box_grad(reg.shape, rep(ii), ch, rep(y0), rep(x0), rep(y1), rep(x1), gg)
        return gr.astype(dtype), None

    t_out = _make(t.astype(dtype), (reg, cls), backward_t)
    o_out = _make(o.astype(dtype), (reg, cls), backward_o)
    return t_out, o_out


def cell_gather_level(reg, cls, img, row, col, ratio):
    """Non-position-sensitive readout: values at each anchor's own cell.

    ``reg`` holds four channels per ratio (ratio-major), ``cls`` one.
    """
    reg, cls = as_tensor(reg), as_tensor(cls)
    img, row, col, ratio = (np.asarray(a, np.int64) for a in (img, row, col, ratio))
    o = cls.data[img, ratio, row, col]
    chans = ratio[:, None] * 4 + np.arange(4)
    t = reg.data[img[:, None], chans, row[:, None], col[:, None]]

    def backward_o(g):
        full = np.zeros_like(cls.data)
        np.add.at(full, (img, ratio, row, col), g)
        return None, full

    def backward_t(g):
        full = np.zeros_like(reg.data)
        np.add.at(full, (img[:, None], chans, row[:, None], col[:, None]), g)
        return full, None

    return _make(t, (reg, cls), backward_t), _make(o, (reg, cls), backward_o)


def ps_pool(reg_maps, cls_maps, anchor, k=4):
    """Pool one window anchor ``(row, col, w, h)`` on a single-image level."""
    row, col, w, h = anchor
    reg_maps = reg_maps if isinstance(reg_maps, Tensor) else Tensor(reg_maps)
    cls_maps = cls_maps if isinstance(cls_maps, Tensor) else Tensor(cls_maps)
    t, o = ps_pool_level(reg_maps, cls_maps, [0], [row], [col], [w], [h], k)
    o_val = float(o.data[0])
    return PSPoolResult(t.data[0].copy(), o_val, float(_stable_sigmoid(np.array([o_val]))[0]))


# -------------------------------------------------------------- box coding


def _centre_size(b):
    b = np.asarray(b, dtype=np.float64)
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(anchors, gts):
    """Regression targets ``(tx, ty, tw, th)`` taking ``anchors`` to ``gts``."""
    ax, ay, aw, ah = _centre_size(anchors)
    gx, gy, gw, gh = _centre_size(gts)
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(anchors, deltas, stats=None, clamp=MAX_LOG_SCALE):
    """Apply regression offsets; log-scales are clamped to ``+-clamp``.

    If ``stats`` (a dict) is given, ``stats["clamped"]`` counts clamped values.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    ax, ay, aw, ah = _centre_size(anchors)
    scale = deltas[..., 2:4]
    clamped = np.abs(scale) > clamp
    n_clamped = int(clamped.sum())
    if n_clamped:
        log.warning("clamped %d box log-scale offsets to +-%g", n_clamped, clamp)
        scale = np.clip(scale, -clamp, clamp)
    if stats is not None:
        stats["clamped"] = stats.get("clamped", 0) + n_clamped
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * np.exp(scale[..., 0])
    h = ah * np.exp(scale[..., 1])
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def encode_box(anchor, gt):
    return encode_boxes(np.asarray(anchor)[None], np.asarray(gt)[None])[0]


def decode_box(anchor, t):
    return decode_boxes(np.asarray(anchor)[None], np.asarray(t)[None])[0]


def inside_image(boxes, image_hw):
    """Mask of boxes lying entirely within ``[0, W] x [0, H]``."""
    h, w = image_hw
    b = np.asarray(boxes).reshape(-1, 4)
    return (b[:, 0] >= 0) & (b[:, 1] >= 0) & (b[:, 2] <= w) & (b[:, 3] <= h)


def filter_image_bounds(boxes, image_hw, *arrays):
    """Drop boxes that cross the image border; extra arrays are filtered alike."""
    keep = inside_image(boxes, image_hw)
    out = (np.asarray(boxes)[keep],) + tuple(np.asarray(a)[keep] for a in arrays)
    return out if arrays else out[0]
