"""Counting things that can be counted exactly: anchors and parameters.

Run: python demos/01_counting.py
"""
import numpy as np

from psrpn.anchors import EXPECTED_640, default_profile, generate_anchors
from psrpn.heads import head_param_table, table_identities
from psrpn.pyramid import LEVELS

STRIDES = (4, 8, 16, 32, 64)

print("== Window-mapped anchors ==")
print("Each level slides a fixed list of windows (in feature cells) over its map.")
print("A window placed at cell (r, c) maps to the pixel box (c*s, r*s, (c+w)*s, (r+h)*s),")
print("so every anchor lies inside the image by construction.\n")
for name, wins in zip(LEVELS, default_profile()):
    print(f"  {name}: {wins}")

a = generate_anchors((640, 640), STRIDES, "window")
print("\nAt 640x640 the placements per level are")
for name, n, want in zip(LEVELS, a.counts(), EXPECTED_640["window"]):
    print(f"  {name}: {n:>7,}  (expected {want:,})")
print(f"  total {len(a):,}")
b = a.boxes
print(f"  min corner {b[:, :2].min():.0f}, max corner {b[:, 2:].max():.0f}: all inside the 640 px frame")

for mode in ("grid3", "grid5"):
    g = generate_anchors((640, 640), STRIDES, mode)
    print(f"\nGrid anchors ({mode}): one per cell per ratio, centred, area (8s)^2 -> {len(g):,} anchors")
    out = ~((g.boxes[:, 0] >= 0) & (g.boxes[:, 1] >= 0) & (g.boxes[:, 2] <= 640) & (g.boxes[:, 3] <= 640))
    print(f"  {out.sum():,} of them cross the border (ignored in training, never filtered from the count)")

print("\n== Parameter counts with the ResNet-50 pyramid ==")
rows = head_param_table()
print(f"{'variant':<10}{'PS':>4}{'ours':>13}{'published':>13}{'residual':>11}")
for r in rows:
    print(f"{r['variant']:<10}{'y' if r['ps'] else 'n':>4}{r['params']:>13,}{r['published']:>13,}{r['residual']:>+11,}")
print("\nBaseline and naive rows match the published totals. GCN and LK rows depend on")
print("internal widths that cannot be recovered, so only their differences are checked:")
for name, ours, want in table_identities(rows):
    print(f"  {name:<28}{ours:>10,}  {'==' if ours == want else '!='} {want:,}")
