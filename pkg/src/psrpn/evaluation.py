"""Proposal ranking and average-recall evaluation.

Recall at budget N and IoU threshold tau greedily matches the top-N
proposals, in descending score order, one-to-one to ground-truth boxes.
Crowd and ignored gts (e.g. VOC ``difficult``) are excluded from the
denominator; a proposal matching only them is discarded without penalty.
The budget is applied before matching, as in the COCO protocol.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .anchors import box_area, iou_matrix

IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
BUDGETS = (10, 100, 1000)
AUC_GRID = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000)
SMALL_MAX = 32**2
LARGE_MIN = 96**2


def nms(boxes, scores, iou_threshold=0.7, max_keep=None):
    """Greedy suppression; returns kept indices in descending score order.

    Equal scores keep input order. A box is suppressed when its IoU with an
    already kept box exceeds ``iou_threshold``.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms: scores must be finite")
    order = np.argsort(-scores, kind="stable")
    x0, y0, x1, y1 = boxes.T
    area = (x1 - x0) * (y1 - y0)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        iw = np.clip(np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest]), 0, None)
        ih = np.clip(np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest]), 0, None)
        inter = iw * ih
        union = area[i] + area[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[ov <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def match_ranks(ious, tau):
    """Greedy one-to-one matching of ranked proposals (rows) to gts (columns).

    Each proposal in turn takes the unmatched gt with the highest IoU >= tau
    (lowest column on ties). Returns, per gt, the rank of the proposal that
    matched it, or ``inf``.
    """
    n_prop, n_gt = ious.shape
    ranks = np.full(n_gt, np.inf)
    if n_gt == 0 or n_prop == 0:
        return ranks
    hits = ious >= tau
    rows = np.flatnonzero(hits.any(axis=1))
    open_ = np.ones(n_gt, dtype=bool)
    for r in rows:
        cand = hits[r] & open_
        if not cand.any():
            continue
        j = int(np.argmax(np.where(cand, ious[r], -1.0)))
        ranks[j] = r
        open_[j] = False
        if not open_.any():
            break
    return ranks


def _valid_gts(gts, crowd=None, ignore=None):
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    keep = np.ones(len(gts), dtype=bool)
    for flags in (crowd, ignore):
        if flags is not None:
            keep &= ~np.asarray(flags, dtype=bool)
    return gts[keep]


def recall_at(proposals, gts, crowd=None, budget=1000, tau=0.5, ignore=None):
    """Fraction of non-crowd gts matched by the top ``budget`` proposals.

    ``proposals`` must already be sorted by descending score. Returns
    ``nan`` when the image has no countable gt.
    """
    gts = _valid_gts(gts, crowd, ignore)
    if len(gts) == 0:
        return float("nan")
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)[:budget]
    ranks = match_ranks(iou_matrix(props, gts), tau)
    return float(np.isfinite(ranks).sum() / len(gts))


def average_recall(proposals, gts, budget=1000, crowd=None, ignore=None, thresholds=IOU_THRESHOLDS):
    """Mean recall over the IoU thresholds 0.50:0.05:0.95."""
    vals = [recall_at(proposals, gts, crowd, budget, t, ignore) for t in thresholds]
    return float(np.mean(vals))


def auc_from_curve(budgets, ar_values):
    """Trapezoidal area of AR over log10(budget), normalised to [0, 1]."""
    x = np.log10(np.asarray(budgets, dtype=np.float64))
    y = np.asarray(ar_values, dtype=np.float64)
    return float(np.sum((y[1:] + y[:-1]) * np.diff(x)) / 2 / (x[-1] - x[0]))


def auc(proposals, gts, crowd=None, ignore=None, grid=AUC_GRID):
    return auc_from_curve(grid, [average_recall(proposals, gts, n, crowd, ignore) for n in grid])


def size_bucket(areas):
    """0 small (a < 32^2), 1 medium, 2 large (a >= 96^2)."""
    areas = np.asarray(areas, dtype=np.float64)
    return np.where(areas < SMALL_MAX, 0, np.where(areas < LARGE_MIN, 1, 2))


def size_stratified(proposals, gts, budget=1000, crowd=None, areas=None, ignore=None):
    """(AR_s, AR_m, AR_l); each bucket is evaluated on its own gts only."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    areas = box_area(gts) if areas is None else np.asarray(areas)
    bucket = size_bucket(areas)
    skip = np.zeros(len(gts), bool)
    for flags in (crowd, ignore):
        if flags is not None:
            skip |= np.asarray(flags, bool)
    return tuple(
        average_recall(proposals, gts[(bucket == b) & ~skip], budget) if np.any((bucket == b) & ~skip) else float("nan")
        for b in range(3)
    )


# ---------------------------------------------------------------- dataset


@dataclass
class ImageEval:
    """Per-image match ranks: ``ranks[t, g]`` for threshold t, countable gt g."""

    ranks: np.ndarray
    buckets: np.ndarray

    def recall(self, budget, mask=None):
        r = self.ranks if mask is None else self.ranks[:, mask]
        return (r < budget).mean(axis=1)


@dataclass
class EvalReport:
    ar: dict
    auc: float
    ar_small: float
    ar_medium: float
    ar_large: float
    recall_curves: dict  # budget -> recall per IoU threshold
    ar_curve: dict  # budget on the AUC grid -> AR
    n_images: int
    meta: dict = field(default_factory=dict)

    def summary(self):
        row = {f"AR@{n}": v for n, v in self.ar.items()}
        row.update({"AUC": self.auc, "AR_s@1000": self.ar_small, "AR_m@1000": self.ar_medium,
                    "AR_l@1000": self.ar_large, "n_images": self.n_images})
        return row


def evaluate_image(proposals, gts, crowd=None, ignore=None, areas=None, thresholds=IOU_THRESHOLDS):
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    keep = np.ones(len(gts), bool)
    for flags in (crowd, ignore):
        if flags is not None:
            keep &= ~np.asarray(flags, bool)
    areas = box_area(gts) if areas is None else np.asarray(areas, dtype=np.float64)
    gts, areas = gts[keep], areas[keep]
    props = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(props, gts)
    ranks = np.stack([match_ranks(ious, t) for t in thresholds]) if len(gts) else np.zeros((len(thresholds), 0))
    return ImageEval(ranks, size_bucket(areas))


def _mean_over_images(evals, budget, bucket=None):
    vals = []
    for ev in evals:
        mask = None if bucket is None else ev.buckets == bucket
        if ev.ranks.shape[1] == 0 or (mask is not None and not mask.any()):
            continue
        vals.append(ev.recall(budget, mask))
    if not vals:
        return np.full(len(IOU_THRESHOLDS), np.nan)
    return np.mean(vals, axis=0)


def evaluate(proposals, annotations, budgets=BUDGETS, meta=None):
    """Aggregate report over images.

    ``proposals``: list of (P, 4) box arrays sorted by score.
    ``annotations``: list of dicts with ``boxes`` and optional ``crowd``,
    ``ignore``, ``areas`` arrays, aligned with ``proposals``. Per-image
    recalls are averaged over images having at least one countable gt.
    """
    if len(proposals) != len(annotations):
        raise ValueError("proposals and annotations must align image by image")
    evals = [
        evaluate_image(p, a["boxes"], a.get("crowd"), a.get("ignore"), a.get("areas"))
        for p, a in zip(proposals, annotations)
    ]
    curves = {int(n): _mean_over_images(evals, n) for n in sorted(set(budgets) | set(AUC_GRID))}
    ar = {int(n): float(curves[n].mean()) for n in budgets}
    ar_curve = {int(n): float(curves[n].mean()) for n in AUC_GRID}
    strata = [float(_mean_over_images(evals, 1000, b).mean()) for b in range(3)]
    info = {"iou_thresholds": [float(t) for t in IOU_THRESHOLDS], "auc_grid": list(AUC_GRID),
            "aggregation": "per-image recall averaged over images with >=1 countable gt"}
    info.update(meta or {})
    return EvalReport(
        ar=ar,
        auc=auc_from_curve(AUC_GRID, [ar_curve[n] for n in AUC_GRID]),
        ar_small=strata[0], ar_medium=strata[1], ar_large=strata[2],
        recall_curves={n: [float(v) for v in curves[n]] for n in budgets},
        ar_curve=ar_curve,
        n_images=sum(ev.ranks.shape[1] > 0 for ev in evals),
        meta=info,
    )


# -------------------------------------------------------------- file I/O


def write_proposal_file(path, boxes, scores):
    with open(path, "w") as fh:
        for b, s in zip(np.asarray(boxes), np.asarray(scores)):
            fh.write(f"{b[0]:.4f} {b[1]:.4f} {b[2]:.4f} {b[3]:.4f} {s:.8f}\n")


def read_proposal_file(path):
    """Returns ``(boxes, scores)`` sorted by descending score (stable)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 5:
                raise ValueError(f"{path}:{lineno}: expected 'x0 y0 x1 y1 score'")
            rows.append([float(v) for v in parts])
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
    order = np.argsort(-arr[:, 4], kind="stable")
    return arr[order, :4], arr[order, 4]


def write_proposals(out_dir, image_ids, proposals, meta=None):
    """One text file per image plus ``manifest.json`` mapping ids to files."""
    os.makedirs(out_dir, exist_ok=True)
    files = {}
    for image_id, p in zip(image_ids, proposals):
        name = f"{image_id}.txt"
        write_proposal_file(os.path.join(out_dir, name), p.boxes, p.scores)
        files[str(image_id)] = name
    manifest = {"images": files}
    manifest.update(meta or {})
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_proposals(path):
    """Load a proposals directory; returns ``{image_id: (boxes, scores)}`` and the manifest."""
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    out = {k: read_proposal_file(os.path.join(path, v)) for k, v in manifest["images"].items()}
    return out, manifest


def write_report(report: EvalReport, out_dir):
    """``curves.csv`` (recall vs IoU per budget, AR vs budget) and ``summary.json``."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "curves.csv"), "w", newline="") as fh:
        fh.write(f"# config_hash={report.meta.get('config_hash', '')}\n")
        w = csv.writer(fh)
        w.writerow(["curve", "budget", "iou", "value"])
        for n, vals in report.recall_curves.items():
            for t, v in zip(IOU_THRESHOLDS, vals):
                w.writerow(["recall_vs_iou", n, f"{t:.2f}", f"{v:.6f}"])
        for n, v in report.ar_curve.items():
            w.writerow(["ar_vs_budget", n, "", f"{v:.6f}"])
    record = {"summary": {k: (round(v, 6) if isinstance(v, float) else v) for k, v in report.summary().items()},
              "meta": report.meta}
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)


def read_report_curves(out_dir):
    recall, ar = {}, {}
    with open(os.path.join(out_dir, "curves.csv")) as fh:
        for row in csv.DictReader(ln for ln in fh if not ln.startswith("#")):
            if row["curve"] == "recall_vs_iou":
                recall.setdefault(int(row["budget"]), []).append((float(row["iou"]), float(row["value"])))
            else:
                ar[int(row["budget"])] = float(row["value"])
    return recall, ar


def plot_report(out_dir, svg_path=None):
    """Recall-vs-IoU (per budget) and AR-vs-budget curves as one SVG."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recall, ar = read_report_curves(out_dir)
    with open(os.path.join(out_dir, "summary.json")) as fh:
        config_hash = json.load(fh).get("meta", {}).get("config_hash", "")
    svg_path = svg_path or os.path.join(out_dir, "curves.svg")
    plt.rcParams["svg.hashsalt"] = "psrpn"
    fig, axes = plt.subplots(1, len(recall) + 1, figsize=(4 * (len(recall) + 1), 3.6))
    for ax, (n, pts) in zip(axes, sorted(recall.items())):
        ious, vals = zip(*pts)
        ax.plot(ious, vals, marker="o")
        ax.set(title=f"{n} proposals", xlabel="IoU", ylabel="recall", xlim=(0.5, 1.0), ylim=(0, 1))
        ax.grid(alpha=0.3)
    ns = sorted(ar)
    axes[-1].semilogx(ns, [ar[n] for n in ns], marker="o")
    axes[-1].set(title="AR vs proposals", xlabel="# proposals", ylabel="average recall", ylim=(0, 1))
    axes[-1].grid(alpha=0.3)
    fig.suptitle(f"config {config_hash}" if config_hash else "", fontsize=8, x=0.99, ha="right")
    fig.tight_layout()
    fig.savefig(svg_path, format="svg", metadata={"Date": None, "Description": f"config_hash={config_hash}"})
    plt.close(fig)
    return svg_path


def report_to_dict(report: EvalReport):
    return asdict(report)
