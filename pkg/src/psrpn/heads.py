"""The six RPN head variants, shared across all pyramid levels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import CBR, Conv2d, Module, SeparableGCN
from .pyramid import PyramidConfig, count_params, pyramid_records
from .tensor import ShapeError

VARIANTS = ("baseline", "naive", "gcn-s", "lk-s", "gcn-ns", "lk-ns")

# Published totals (ResNet-50 backbone + pyramid + head) keyed by (variant, position-sensitive).
PUBLISHED_PARAMS = {
    ("baseline", False): 26_858_334,
    ("naive", False): 28_039_006,
    ("gcn-s", False): 27_137_630,
    ("lk-s", False): 27_813_470,
    ("gcn-ns", False): 27_727_966,
    ("lk-ns", False): 28_403_806,
    ("baseline", True): 26_875_104,
    ("naive", True): 28_055_776,
    ("gcn-s", True): 27_154_400,
    ("lk-s", True): 27_830_240,
    ("gcn-ns", True): 27_744_736,
    ("lk-ns", True): 28_420_576,
}

SMOOTHER_DELTA = 590_336  # one 256->256 CBR3
NAIVE_DELTA = 1_180_672  # two CBR3 blocks
PS_DELTA = 16_770  # 80 vs 15 sibling output channels


@dataclass
class HeadConfig:
    variant: str = "baseline"
    k: int = 4
    position_sensitive: bool = True
    gcn_mid: int = 32
    gcn_kernel: int = 15
    lk_width: int = 16
    lk_kernel: int = 15
    ratios: int = 3
    in_channels: int = 256

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown head variant {self.variant!r}; choose from {VARIANTS}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.ratios not in (3, 5):
            raise ValueError("ratio count must be 3 or 5")

    @property
    def reg_channels(self):
        return 4 * self.k**2 if self.position_sensitive else 4 * self.ratios

    @property
    def cls_channels(self):
        return self.k**2 if self.position_sensitive else self.ratios

    @property
    def shared_smoother(self):
        return not self.variant.endswith("-ns")


class LargeKernel(Module):
    """Dense k x k CBR down to a narrow width, lifted back by a 1x1 conv."""

    def __init__(self, cin, width, kernel=15, rng=None):
        self.block = CBR(cin, width, kernel, rng=rng)
        self.lift = Conv2d(width, cin, 1, rng=rng)

    def call_levels(self, xs):
        return [self.lift(y) for y in self.block.call_levels(xs)]


class RPNHead(Module):
    """Context block (GCN / large kernel), smoother(s), and sibling reg/cls CB1 blocks.

    ``-s`` variants feed both siblings from one smoother; ``-ns`` variants
    give each sibling its own. The context output is added to the input.
    """

    def __init__(self, cfg: HeadConfig, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        c = cfg.in_channels
        self.cfg = cfg
        fam = cfg.variant.split("-")[0]
        self.context = None
        if fam == "gcn":
            self.context = SeparableGCN(c, cfg.gcn_mid, c, cfg.gcn_kernel, rng=rng)
        elif fam == "lk":
            self.context = LargeKernel(c, cfg.lk_width, cfg.lk_kernel, rng=rng)
        self.extra = [CBR(c, c, 3, rng=rng) for _ in range(2)] if fam == "naive" else []
        self.smoother_reg = CBR(c, c, 3, rng=rng)
        self.smoother_cls = self.smoother_reg if cfg.shared_smoother else CBR(c, c, 3, rng=rng)
        self.reg = CBR(c, cfg.reg_channels, 1, relu=False, rng=rng)
        self.cls = CBR(c, cfg.cls_channels, 1, relu=False, rng=rng)

    def __call__(self, levels):
        """Apply the head to a list of maps; returns ``[(reg, cls), ...]``."""
        single = not isinstance(levels, (list, tuple))
        xs = [levels] if single else list(levels)
        for x in xs:
            if x.shape[1] != self.cfg.in_channels:
                raise ShapeError(f"head expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        if isinstance(self.context, SeparableGCN):
            xs = [T.add(x, self.context(x)) for x in xs]
        elif isinstance(self.context, LargeKernel):
            xs = [T.add(x, y) for x, y in zip(xs, self.context.call_levels(xs))]
        for blk in self.extra:
            xs = blk.call_levels(xs)
        sr = self.smoother_reg.call_levels(xs)
        sc = sr if self.smoother_cls is self.smoother_reg else self.smoother_cls.call_levels(xs)
        out = list(zip(self.reg.call_levels(sr), self.cls.call_levels(sc)))
        return out[0] if single else out

    def arch_records(self, prefix="head.", _memo=None):
        return super().arch_records(prefix, _memo)


def head_forward(x, head):
    return head(x)


def head_param_table(variants=VARIANTS, pyramid=None, **head_kwargs):
    """Parameter totals per (variant, PS) with the ResNet-50 pyramid.

    Returns a list of row dicts with our count, the published count, and
    the residual between them.
    """
    pyramid = PyramidConfig(encoder="resnet50-graph") if pyramid is None else pyramid
    base = pyramid_records(pyramid)
    rows = []
    for ps in (False, True):
        for v in variants:
            cfg = HeadConfig(variant=v, position_sensitive=ps, in_channels=pyramid.channels, **head_kwargs)
            total = count_params(base + RPNHead(cfg).arch_records()).total
            published = PUBLISHED_PARAMS.get((v, ps))
            rows.append({
                "variant": v,
                "ps": ps,
                "params": total,
                "published": published,
                "residual": None if published is None else total - published,
            })
    return rows


def table_identities(rows):
    """The exactly derivable differences, as (name, ours, expected) triples."""
    by = {(r["variant"], r["ps"]): r["params"] for r in rows}
    checks = []
    for ps in (False, True):
        tag = "PS" if ps else "non-PS"
        if ("naive", ps) in by and ("baseline", ps) in by:
            checks.append((f"naive - baseline ({tag})", by[("naive", ps)] - by[("baseline", ps)], NAIVE_DELTA))
        for fam in ("gcn", "lk"):
            if (f"{fam}-ns", ps) in by and (f"{fam}-s", ps) in by:
                checks.append((f"{fam}-ns - {fam}-s ({tag})", by[(f"{fam}-ns", ps)] - by[(f"{fam}-s", ps)], SMOOTHER_DELTA))
    for v in VARIANTS:
        if (v, True) in by and (v, False) in by:
            checks.append((f"{v}: PS - non-PS", by[(v, True)] - by[(v, False)], PS_DELTA))
    return checks
