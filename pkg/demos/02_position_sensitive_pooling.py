"""How one window anchor reads its score from k*k position-sensitive maps.

The head emits k*k classification maps per level. A window anchor is split
into a k x k grid of bins; bin (i, j) averages map number i*k + j over its
cells, and the anchor's logit is the mean of the k*k bin averages.

Run: python demos/02_position_sensitive_pooling.py
"""
import numpy as np

from psrpn import tensor as T
from psrpn.pspool import partition_bins, ps_pool_level

k = 3
h = w = 8
rng = np.random.default_rng(0)

# maps that each "prefer" one part of an object: map i*k+j is bright where a
# 6x6 object at cells (1..6, 1..6) has its (i, j) part
cls = np.zeros((1, k * k, h, w))
ys, xs = partition_bins(6, k), partition_bins(6, k)
for i, (y0, y1) in enumerate(ys):
    for j, (x0, x1) in enumerate(xs):
        cls[0, i * k + j, 1 + y0 : 1 + y1, 1 + x0 : 1 + x1] = 1.0
reg = rng.normal(0, 0.01, (1, 4 * k * k, h, w))

print("bins of a 6-cell side split in", k, ":", partition_bins(6, k))


def score(row, col, size):
    t, o = ps_pool_level(T.Tensor(reg), T.Tensor(cls), np.array([0]), np.array([row]), np.array([col]),
                         np.array([size]), np.array([size]), k)
    return float(o.data[0])


print("\nlogit of a 6x6 window at each placement (object sits at row 1, col 1):")
for r in range(h - 6 + 1):
    print("   " + "  ".join(f"{score(r, c, 6):.2f}" for c in range(w - 6 + 1)))
print("\nOnly the aligned window sees every part in the right bin and scores 1.0;")
print("shifted windows read parts from the wrong maps, so their logits drop.")
