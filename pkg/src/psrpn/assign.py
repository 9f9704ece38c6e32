"""Anchor labelling, balanced minibatch sampling, and the training loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import crowd_overlap_matrix, iou_matrix
from .tensor import _make, _stable_sigmoid, as_tensor

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class LabelAssignment:
    labels: np.ndarray  # int8: 1 positive, 0 negative, -1 ignore
    matched: np.ndarray  # gt index for positives, -1 elsewhere
    max_iou: np.ndarray

    @property
    def positives(self):
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negatives(self):
        return np.flatnonzero(self.labels == NEGATIVE)


@dataclass
class SamplerConfig:
    anchors_per_image: int = 256
    images_per_batch: int = 8

    def __post_init__(self):
        if self.anchors_per_image <= 0 or self.anchors_per_image % 2:
            raise ValueError("anchors_per_image must be even and positive")
        if self.images_per_batch <= 0:
            raise ValueError("images_per_batch must be positive")


@dataclass
class LossBreakdown:
    total: float
    reg: float
    pos_cls: float
    neg_cls: float


def assign_labels(anchors, gts, hi=0.7, lo=0.3, crowd=None):
    """Label anchors against ground-truth boxes.

    IoU above ``hi`` with any gt gives a positive; IoU below ``lo`` with all
    gts a negative. Each gt also promotes its best anchor (lowest index on
    ties) if that IoU exceeds ``lo``. Non-positive anchors covering a crowd
    region by more than ``lo`` of their own area are ignored.
    """
    if not 0 <= lo < hi <= 1:
        raise ValueError(f"need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    m = len(anchors)
    labels = np.full(m, IGNORE, dtype=np.int8)
    matched = np.full(m, -1, dtype=np.int64)
    if len(gts) == 0:
        labels[:] = NEGATIVE
        max_iou = np.zeros(m)
    else:
        ious = iou_matrix(anchors, gts)
        max_iou = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
        labels[max_iou < lo] = NEGATIVE
        labels[max_iou > hi] = POSITIVE
        best_anchor = ious.argmax(axis=0)
        promote = best_anchor[ious[best_anchor, np.arange(len(gts))] > lo]
        labels[promote] = POSITIVE
        pos = labels == POSITIVE
        matched[pos] = best_gt[pos]
    if crowd is not None and len(crowd):
        covered = crowd_overlap_matrix(anchors, crowd).max(axis=1) > lo
        labels[covered & (labels != POSITIVE)] = IGNORE
    return LabelAssignment(labels, matched, max_iou)


def sample_minibatch(assignment, cfg: SamplerConfig, rng):
    """Up to half positives, the rest negatives; returns ``(pos_idx, neg_idx)``."""
    pos, neg = assignment.positives, assignment.negatives
    if len(pos) == 0 and len(neg) == 0:
        raise ValueError("image has neither positive nor negative anchors")
    n_pos = min(len(pos), cfg.anchors_per_image // 2)
    n_neg = min(len(neg), cfg.anchors_per_image - n_pos)
    pos_idx = rng.choice(pos, size=n_pos, replace=False) if n_pos else pos[:0]
    neg_idx = rng.choice(neg, size=n_neg, replace=False) if n_neg else neg[:0]
    return np.sort(pos_idx), np.sort(neg_idx)


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1, 0.5 * x * x, ax - 0.5)


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def compute_loss(t, o, targets, labels, n_images, anchors_per_image):
    """Smooth-L1 regression on positives plus binary cross-entropy on sigmoid(o).

    ``t`` (M, 4) and ``o`` (M,) are tensors for the sampled anchors;
    ``labels`` is 1 for positives and 0 for negatives, ``targets`` holds the
    encoded gt offsets (rows of negatives are ignored). Everything is summed
    and divided by ``n_images * anchors_per_image``.

    Returns ``(loss_tensor, LossBreakdown)``.
    """
    t, o = as_tensor(t), as_tensor(o)
    labels = np.asarray(labels)
    targets = np.asarray(targets, dtype=t.dtype)
    for name, arr in (("t", t.data), ("o", o.data), ("targets", targets[labels == POSITIVE])):
        bad = ~np.isfinite(arr)
        if bad.any():
            row = int(np.argwhere(bad)[0][0])
            raise FloatingPointError(f"non-finite {name} at sampled anchor {row}")
    pos = labels == POSITIVE
    norm = float(n_images * anchors_per_image)
    diff = np.where(pos[:, None], t.data - targets, 0)
    reg = float(smooth_l1(diff).sum())
    pos_cls = float(_softplus(-o.data[pos]).sum())
    neg_cls = float(_softplus(o.data[~pos]).sum())
    total = (reg + pos_cls + neg_cls) / norm
    value = np.asarray(total, dtype=t.dtype)

    def backward(g):
        gt = np.where(np.abs(diff) < 1, diff, np.sign(diff)) * (g / norm)
        s = _stable_sigmoid(o.data.astype(np.float64))
        go = np.where(pos, s - 1, s) * (g / norm)
        return gt.astype(t.dtype), go.astype(o.dtype)

    return _make(value, (t, o), backward), LossBreakdown(total, reg, pos_cls, neg_cls)
