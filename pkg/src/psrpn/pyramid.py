"""Encoder/decoder feature pyramid and architecture parameter accounting."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .layers import CBR, LayerRecord, Module
from .tensor import ShapeError

LEVELS = ("D2", "D3", "D4", "D5", "D6")
RESNET50_WIDTHS = (256, 512, 1024, 2048)


@dataclass
class PyramidConfig:
    strides: tuple = (4, 8, 16, 32, 64)
    channels: int = 256
    encoder: str = "toy"  # "toy" or "resnet50-graph" (counting only)
    widths: tuple = (64, 128, 256, 512)
    stage_blocks: int = 0  # extra stride-1 CBR3 per toy stage
    use_d6: bool = True

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.widths = tuple(int(w) for w in self.widths)
        if any(b != 2 * a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must double level to level, got {self.strides}")
        if self.channels <= 0:
            raise ValueError("decoder channels must be positive")
        if self.encoder not in ("toy", "resnet50-graph"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if len(self.widths) != 4:
            raise ValueError("toy encoder needs four stage widths")

    @property
    def max_stride(self):
        return self.strides[-1] if self.use_d6 else self.strides[-2]

    @property
    def level_strides(self):
        return self.strides if self.use_d6 else self.strides[:-1]


class ToyEncoder(Module):
    """Stem of two stride-2 CBR3 blocks to E2, then a stride-2 CBR3 per stage."""

    def __init__(self, widths=(64, 128, 256, 512), in_channels=3, stage_blocks=0, rng=None):
        w0 = widths[0]
        self.stem = [CBR(in_channels, w0, 3, 2, rng=rng), CBR(w0, w0, 3, 2, rng=rng)]
        self.stages = [CBR(a, b, 3, 2, rng=rng) for a, b in zip(widths[:-1], widths[1:])]
        self.refine = [
            CBR(w, w, 3, 1, rng=rng) for w in widths for _ in range(stage_blocks)
        ]
        self.stage_blocks = stage_blocks

    def __call__(self, image):
        x = image
        for blk in self.stem:
            x = blk(x)
        feats = []
        for i in range(4):
            if i > 0:
                x = self.stages[i - 1](x)
            for blk in self.refine[i * self.stage_blocks : (i + 1) * self.stage_blocks]:
                x = blk(x)
            feats.append(x)
        return feats


class Decoder(Module):
    """Top-down decoder: CBR1 skips, 2x bilinear upsampling, addition, CBR3 de-aliasing.

    D5 is the selected top feature (no addition, hence no de-aliasing block);
    D6 is a parameter-free 2x2 average downsample of D5.
    """

    def __init__(self, in_widths, channels=256, use_d6=True, rng=None):
        self.laterals = [CBR(w, channels, 1, rng=rng) for w in in_widths]
        self.dealias = [CBR(channels, channels, 3, rng=rng) for _ in in_widths[:-1]]
        self.channels = channels
        self.use_d6 = use_d6

    def __call__(self, feats):
        if len(feats) != len(self.laterals):
            raise ShapeError(f"decoder expects {len(self.laterals)} encoder maps, got {len(feats)}")
        for f, lat in zip(feats, self.laterals):
            if f.shape[1] != lat.conv.weight.shape[1]:
                raise ShapeError(f"encoder map with {f.shape[1]} channels, skip expects {lat.conv.weight.shape[1]}")
        top = self.laterals[-1](feats[-1])
        outs = [top]
        for i in range(len(feats) - 2, -1, -1):
            merged = T.add(T.bilinear_upsample2x(outs[0]), self.laterals[i](feats[i]))
            outs.insert(0, self.dealias[i](merged))
        if self.use_d6:
            outs.append(T.avg_downsample2x(top))
        return outs


def check_input_dims(image, multiple=64):
    h, w = image.shape[2:]
    if h % multiple or w % multiple:
        raise ShapeError(f"input {h}x{w} is not a multiple of {multiple}; pad it first")


def encode(image, encoder, multiple=64):
    check_input_dims(image, multiple)
    return encoder(image)


def decode(feats, decoder):
    return decoder(feats)


# ------------------------------------------------------------- accounting


def resnet50_records(prefix="backbone."):
    """Layer records of ResNet-50 without the final pooling/fc/softmax."""
    recs = [
        LayerRecord("conv", 7, 7, 3, 64, prefix + "conv1"),
        LayerRecord("bn", 1, 1, 64, 64, prefix + "bn1"),
    ]
    cin = 64
    for stage, (width, blocks) in enumerate(zip((64, 128, 256, 512), (3, 4, 6, 3)), start=1):
        for b in range(blocks):
            p = f"{prefix}layer{stage}.{b}."
            cout = 4 * width
            recs += [
                LayerRecord("conv", 1, 1, cin, width, p + "conv1"),
                LayerRecord("bn", 1, 1, width, width, p + "bn1"),
                LayerRecord("conv", 3, 3, width, width, p + "conv2"),
                LayerRecord("bn", 1, 1, width, width, p + "bn2"),
                LayerRecord("conv", 1, 1, width, cout, p + "conv3"),
                LayerRecord("bn", 1, 1, cout, cout, p + "bn3"),
            ]
            if b == 0:
                recs += [
                    LayerRecord("conv", 1, 1, cin, cout, p + "downsample.0"),
                    LayerRecord("bn", 1, 1, cout, cout, p + "downsample.1"),
                ]
            cin = cout
    return recs


@dataclass
class ParamCount:
    total: int
    by_group: OrderedDict = field(default_factory=OrderedDict)

    def by_prefix(self):
        """Totals per top-level module name (text before the first dot)."""
        out = OrderedDict()
        for group, n in self.by_group.items():
            key = group.split(".", 1)[0]
            out[key] = out.get(key, 0) + n
        return out


def count_params(records) -> ParamCount:
    """Exact parameter count; records sharing a group are counted once."""
    by_group = OrderedDict()
    for rec in records:
        if rec.group in by_group:
            continue
        by_group[rec.group] = rec.n_params
    return ParamCount(sum(by_group.values()), by_group)


def records_to_dict(records):
    return [
        {"kind": r.kind, "kernel": [r.kh, r.kw], "in": r.cin, "out": r.cout, "group": r.group}
        for r in records
    ]


def records_from_dict(rows):
    return [
        LayerRecord(r["kind"], int(r["kernel"][0]), int(r["kernel"][1]), int(r["in"]), int(r["out"]), r["group"])
        for r in rows
    ]


def check_chaining(records):
    """Raise if consecutive conv -> bn records disagree on channel counts."""
    for a, b in zip(records, records[1:]):
        if a.kind == "conv" and b.kind == "bn" and a.cout != b.cin:
            raise ShapeError(f"{a.group} outputs {a.cout} channels but {b.group} normalises {b.cin}")


def build_backbone(cfg: PyramidConfig, in_channels=3, rng=None):
    """Instantiate the executable encoder and decoder for ``cfg``."""
    if cfg.encoder != "toy":
        raise ValueError("only the toy encoder is executable; resnet50-graph is for counting")
    rng = np.random.default_rng(0) if rng is None else rng
    enc = ToyEncoder(cfg.widths, in_channels, cfg.stage_blocks, rng=rng)
    dec = Decoder(cfg.widths, cfg.channels, cfg.use_d6, rng=rng)
    return enc, dec


def pyramid_records(cfg: PyramidConfig):
    """Records for encoder + decoder of ``cfg`` (ResNet-50 graph or toy)."""
    if cfg.encoder == "resnet50-graph":
        enc = resnet50_records()
        widths = RESNET50_WIDTHS
    else:
        enc = ToyEncoder(cfg.widths, stage_blocks=cfg.stage_blocks).arch_records("backbone.")
        widths = cfg.widths
    dec = Decoder(widths, cfg.channels, cfg.use_d6).arch_records("decoder.")
    return enc + dec
