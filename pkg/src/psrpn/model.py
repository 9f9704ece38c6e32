"""End-to-end proposal network: pyramid, shared head, anchors, pooling, ranking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .anchors import generate_anchors
from .evaluation import nms
from .heads import HeadConfig, RPNHead
from .layers import Module
from .pspool import MAX_LOG_SCALE, cell_gather_level, decode_boxes, inside_image, ps_pool_level
from .pyramid import PyramidConfig, build_backbone, check_input_dims
from .tensor import Tensor, no_grad

PIXEL_MEAN = 0.5
PIXEL_STD = 0.25


@dataclass
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    anchor_mode: str = ""  # derived from head.position_sensitive when empty

    def __post_init__(self):
        if not self.anchor_mode:
            self.anchor_mode = "window" if self.head.position_sensitive else f"grid{self.head.ratios}"
        if self.head.position_sensitive != (self.anchor_mode == "window"):
            raise ValueError("position-sensitive heads pool window anchors; grid anchors need a non-PS head")
        if self.head.in_channels != self.pyramid.channels:
            raise ValueError("head input width must equal decoder channels")


@dataclass
class Proposals:
    boxes: np.ndarray  # (P, 4) image pixels
    scores: np.ndarray  # (P,) in (0, 1)
    levels: np.ndarray  # (P,)


class ProposalNet(Module):
    def __init__(self, cfg: ModelConfig, seed=0, in_channels=3, decode_clamp=MAX_LOG_SCALE):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.decode_clamp = decode_clamp
        self.encoder, self.decoder = build_backbone(cfg.pyramid, in_channels, rng)
        self.head = RPNHead(cfg.head, rng)
        self._anchor_cache = {}

    def anchors(self, image_hw):
        key = tuple(image_hw)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(key, self.cfg.pyramid.level_strides, self.cfg.anchor_mode)
        return self._anchor_cache[key]

    def __call__(self, images):
        """Score maps ``[(reg, cls), ...]`` for each pyramid level."""
        images = images if isinstance(images, Tensor) else Tensor(np.asarray(images, np.float32))
        check_input_dims(images, self.cfg.pyramid.max_stride)
        x = T.scale(Tensor(images.data - PIXEL_MEAN), 1.0 / PIXEL_STD)
        levels = self.decoder(self.encoder(x))
        return self.head(levels)

    def pool(self, outputs, anchors, img, idx):
        """Pool the anchors ``idx`` of images ``img``; both sorted by anchor level.

        Returns ``(t, o)`` tensors with rows in the given order.
        """
        img, idx = np.asarray(img, np.int64), np.asarray(idx, np.int64)
        lv = anchors.level[idx]
        if np.any(np.diff(lv) < 0):
            raise ValueError("pool() expects anchors sorted by level")
        ts, os_ = [], []
        k = self.cfg.head.k
        for lvl in np.unique(lv):
            sel = lv == lvl
            reg, cls = outputs[lvl]
            a = idx[sel]
            if self.cfg.head.position_sensitive:
                t, o = ps_pool_level(reg, cls, img[sel], anchors.row[a], anchors.col[a],
                                     anchors.win_w[a], anchors.win_h[a], k)
            else:
                t, o = cell_gather_level(reg, cls, img[sel], anchors.row[a], anchors.col[a], anchors.shape[a])
            ts.append(t)
            os_.append(o)
        if len(ts) == 1:
            return ts[0], os_[0]
        return T.concat(ts, axis=0), T.concat(os_, axis=0)

    def propose(self, images, top_n=1000, nms_iou=0.7, pre_nms_top_n=None):
        """Ranked, bounds-filtered, deduplicated proposals for each image.

        ``nms_iou=None`` disables suppression.
        """
        images = np.asarray(images, np.float32)
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                outputs = self(images)
        finally:
            self.train(was_training)
        hw = images.shape[2:]
        anchors = self.anchors(hw)
        results = []
        all_idx = np.arange(len(anchors))
        for n in range(images.shape[0]):
            with no_grad():
                t, o = self.pool(outputs, anchors, np.full(len(anchors), n), all_idx)
            results.append(rank_proposals(anchors, t.data, o.data, hw, top_n, nms_iou, pre_nms_top_n,
                                          self.decode_clamp))
        return results


def rank_proposals(anchors, t, o, image_hw, top_n=1000, nms_iou=0.7, pre_nms_top_n=None,
                   clamp=MAX_LOG_SCALE):
    """Decode, drop boxes crossing the border, sort by score, suppress, truncate."""
    boxes = decode_boxes(anchors.boxes, t, clamp=clamp)
    scores = 1.0 / (1.0 + np.exp(-np.asarray(o, np.float64)))
    keep = inside_image(boxes, image_hw)
    boxes, scores, levels = boxes[keep], scores[keep], anchors.level[keep]
    order = np.argsort(-scores, kind="stable")
    if pre_nms_top_n is not None:
        order = order[:pre_nms_top_n]
    boxes, scores, levels = boxes[order], scores[order], levels[order]
    if nms_iou is not None:
        kept = nms(boxes, scores, nms_iou, max_keep=top_n)
        boxes, scores, levels = boxes[kept], scores[kept], levels[kept]
    return Proposals(boxes[:top_n], scores[:top_n], levels[:top_n])
