"""Window-mapped and grid anchors, box geometry, and the anchor-count audit."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pyramid import LEVELS

BASE_WINDOWS = ((8, 8), (4, 8), (8, 4), (3, 9), (9, 3))
TOP_EXTRA = ((12, 12), (6, 12), (12, 6), (12, 4), (4, 12))
BOTTOM_EXTRA = ((4, 4), (2, 4), (4, 2))

RATIOS_3 = ((1, 1), (1, 2), (2, 1))
RATIOS_5 = RATIOS_3 + ((1, 3), (3, 1))

# Anchor counts for a 640x640 input, per level D2..D6.
EXPECTED_640 = {
    "window": (194_058, 27_803, 5_963, 1_043, 83),
    "grid3": (76_800, 19_200, 4_800, 1_200, 300),
    "grid5": (128_000, 32_000, 8_000, 2_000, 500),
}


def default_profile(n_levels=5):
    """Window sizes ``(w, h)`` in feature cells for each level, bottom first."""
    profile = [list(BASE_WINDOWS) for _ in range(n_levels)]
    profile[0] = profile[0] + list(BOTTOM_EXTRA)
    profile[-1] = profile[-1] + list(TOP_EXTRA)
    return profile


@dataclass
class AnchorSet:
    """Anchors for one image size, concatenated over levels.

    ``boxes`` are ``(x0, y0, x1, y1)`` image pixels. ``row``/``col`` give the
    window's top-left cell (window mode) or the anchor's own cell (grid
    mode); ``shape`` indexes the level's window list or the ratio set.
    """

    boxes: np.ndarray
    level: np.ndarray
    row: np.ndarray
    col: np.ndarray
    win_w: np.ndarray
    win_h: np.ndarray
    shape: np.ndarray
    strides: tuple
    feature_dims: tuple
    mode: str

    def __len__(self):
        return len(self.boxes)

    def counts(self):
        return tuple(int(n) for n in np.bincount(self.level, minlength=len(self.strides)))

    def level_slice(self, lvl):
        idx = np.flatnonzero(self.level == lvl)
        return slice(int(idx[0]), int(idx[-1]) + 1) if len(idx) else slice(0, 0)


def feature_dims(image_hw, strides):
    h, w = image_hw
    return tuple((h // s, w // s) for s in strides)


def window_count(fh, fw, w, h):
    return max(0, fh - h + 1) * max(0, fw - w + 1)


def generate_window_anchors(image_hw, strides=(4, 8, 16, 32, 64), profile=None):
    """Every placement of every window that fits the level's feature map.

    Ordering is (level, window index, row, col). The anchor for a window at
    cell (r, c) is ``(c*s, r*s, (c+w)*s, (r+h)*s)``.
    """
    profile = default_profile(len(strides)) if profile is None else profile
    dims = feature_dims(image_hw, strides)
    parts = {k: [] for k in ("boxes", "level", "row", "col", "w", "h", "shape")}
    for lvl, (s, (fh, fw), windows) in enumerate(zip(strides, dims, profile)):
        for si, (w, h) in enumerate(windows):
            nr, nc = fh - h + 1, fw - w + 1
            if nr <= 0 or nc <= 0:
                continue
            rr, cc = np.meshgrid(np.arange(nr), np.arange(nc), indexing="ij")
            rr, cc = rr.ravel(), cc.ravel()
            parts["boxes"].append(np.stack([cc * s, rr * s, (cc + w) * s, (rr + h) * s], axis=1))
            parts["row"].append(rr)
            parts["col"].append(cc)
            n = len(rr)
            parts["level"].append(np.full(n, lvl))
            parts["w"].append(np.full(n, w))
            parts["h"].append(np.full(n, h))
            parts["shape"].append(np.full(n, si))
    return _assemble(parts, strides, dims, "window")


def generate_grid_anchors(image_hw, strides=(4, 8, 16, 32, 64), ratios=3, base=8):
    """Classic anchors: one per cell per aspect ratio, centred on the cell.

    Each anchor has area ``(base*s)**2``; boxes may cross the image border.
    """
    ratio_set = {3: RATIOS_3, 5: RATIOS_5}[ratios]
    dims = feature_dims(image_hw, strides)
    parts = {k: [] for k in ("boxes", "level", "row", "col", "w", "h", "shape")}
    for lvl, (s, (fh, fw)) in enumerate(zip(strides, dims)):
        rr, cc = np.meshgrid(np.arange(fh), np.arange(fw), indexing="ij")
        rr, cc = rr.ravel(), cc.ravel()
        cx, cy = (cc + 0.5) * s, (rr + 0.5) * s
        for si, (rw, rh) in enumerate(ratio_set):
            side = base * s
            aw = side * np.sqrt(rw / rh)
            ah = side * np.sqrt(rh / rw)
            parts["boxes"].append(np.stack([cx - aw / 2, cy - ah / 2, cx + aw / 2, cy + ah / 2], axis=1))
            parts["row"].append(rr)
            parts["col"].append(cc)
            n = len(rr)
            parts["level"].append(np.full(n, lvl))
            parts["w"].append(np.full(n, 1))
            parts["h"].append(np.full(n, 1))
            parts["shape"].append(np.full(n, si))
    aset = _assemble(parts, strides, dims, f"grid{ratios}")
    # keep (level, cell, ratio) order so a cell's ratios are adjacent like the channel layout
    order = np.lexsort((aset.shape, aset.col, aset.row, aset.level))
    return _reorder(aset, order)


def _assemble(parts, strides, dims, mode):
    def cat(key, dtype):
        return np.concatenate(parts[key]).astype(dtype) if parts[key] else np.zeros(0, dtype)

    boxes = np.concatenate(parts["boxes"]).astype(np.float64) if parts["boxes"] else np.zeros((0, 4))
    return AnchorSet(
        boxes=boxes,
        level=cat("level", np.int64),
        row=cat("row", np.int64),
        col=cat("col", np.int64),
        win_w=cat("w", np.int64),
        win_h=cat("h", np.int64),
        shape=cat("shape", np.int64),
        strides=tuple(strides),
        feature_dims=dims,
        mode=mode,
    )


def _reorder(aset, order):
    return AnchorSet(
        boxes=aset.boxes[order], level=aset.level[order], row=aset.row[order], col=aset.col[order],
        win_w=aset.win_w[order], win_h=aset.win_h[order], shape=aset.shape[order],
        strides=aset.strides, feature_dims=aset.feature_dims, mode=aset.mode,
    )


def generate_anchors(image_hw, strides, mode="window", profile=None):
    if mode == "window":
        return generate_window_anchors(image_hw, strides, profile)
    if mode in ("grid3", "grid5"):
        return generate_grid_anchors(image_hw, strides, int(mode[-1]))
    raise ValueError(f"unknown anchor mode {mode!r}")


# ------------------------------------------------------------------ boxes


def box_area(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou(a, b):
    """IoU of two ``(x0, y0, x1, y1)`` boxes."""
    return float(iou_matrix(np.asarray([a]), np.asarray([b]))[0, 0])


def intersection_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    return np.clip(iw, 0, None) * np.clip(ih, 0, None)


def iou_matrix(a, b):
    """Pairwise IoU, shape ``(len(a), len(b))``."""
    inter = intersection_matrix(a, b)
    union = box_area(np.asarray(a).reshape(-1, 4))[:, None] + box_area(np.asarray(b).reshape(-1, 4))[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def crowd_overlap_matrix(a, crowd):
    """Intersection over the area of each box in ``a`` (crowd-region matching)."""
    inter = intersection_matrix(a, crowd)
    area = box_area(np.asarray(a).reshape(-1, 4))[:, None]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(area > 0, inter / area, 0.0)


# ------------------------------------------------------------------- audit


def anchor_audit(size=640, mode="window", strides=(4, 8, 16, 32, 64)):
    """Per-level counts for a square input, plus the expected counts at 640.

    Counts come from the placement formula; for other sizes the expectation
    is a brute-force enumeration of placements (or cells for grid modes).
    """
    dims = feature_dims((size, size), strides)
    if mode == "window":
        counts = tuple(
            sum(window_count(fh, fw, w, h) for w, h in wins)
            for (fh, fw), wins in zip(dims, default_profile(len(strides)))
        )
    else:
        r = int(mode[-1])
        counts = tuple(fh * fw * r for fh, fw in dims)
    if size == 640 and tuple(strides) == (4, 8, 16, 32, 64):
        expected = EXPECTED_640[mode]
    else:
        expected = brute_force_counts(size, mode, strides)
    return counts, expected


def brute_force_counts(size, mode, strides=(4, 8, 16, 32, 64)):
    """Enumerate placements one by one and keep those whose box is in the image."""
    out = []
    for lvl, s in enumerate(strides):
        f = size // s
        n = 0
        if mode == "window":
            for w, h in default_profile(len(strides))[lvl]:
                for r in range(f):
                    for c in range(f):
                        if (c + w) * s <= size and (r + h) * s <= size:
                            n += 1
        else:
            n = sum(1 for _ in range(f) for _ in range(f)) * int(mode[-1])
        out.append(n)
    return tuple(out)


LEVEL_NAMES = LEVELS
