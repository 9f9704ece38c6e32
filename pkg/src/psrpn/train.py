"""SGD training loop, learning-rate schedule, and checkpoints."""
from __future__ import annotations

import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import pft
from .assign import POSITIVE, NEGATIVE, IGNORE, LossBreakdown, SamplerConfig, assign_labels, compute_loss, sample_minibatch
from .pspool import encode_boxes, inside_image

log = logging.getLogger(__name__)


@dataclass
class TrainerConfig:
    epochs: int = 20
    lr0: float = 0.1
    lr_base: float = 10.0
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    iou_hi: float = 0.7
    iou_lo: float = 0.3
    seed: int = 7


def lr_at(epoch, lr0=0.1, base=10.0, decay=0.1):
    """``lr0 * base ** (-decay * epoch)``, rounded to 12 significant digits.

    The rounding strips representation noise so the schedule hits its decimal
    values exactly (0.1 * 10**-1 is 0.010000000000000002 in raw floats).
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return float(f"{lr0 * base ** (-decay * epoch):.12g}")


class SGD:
    """Classical momentum: ``buf = m * buf + (g + wd * p)``, ``p -= lr * buf``.

    Weight decay applies to convolution weights only (parameters named
    ``*weight``), never to batch-norm scale and shift.
    """

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4):
        self.params = list(named_params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.params}

    def decays(self, name):
        return name.endswith("weight")

    def step(self, lr):
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.decays(name) and self.weight_decay:
                g = g + p.data.dtype.type(self.weight_decay) * p.data
            buf = self.buffers[name]
            buf *= p.data.dtype.type(self.momentum)
            buf += g
            p.data -= p.data.dtype.type(lr) * buf


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch, step, detail):
        super().__init__(f"training diverged at epoch {epoch}, step {step}: {detail}")
        self.epoch, self.step = epoch, step


@dataclass
class ImageTargets:
    """Precomputed labels of one training image against the fixed anchor set."""

    assignment: object
    pos_targets: np.ndarray  # (P, 4) encoded offsets, rows follow assignment.positives


def gt_split(annotation):
    """Split annotation arrays into (regular gts, regions to ignore)."""
    boxes = np.asarray(annotation["boxes"], np.float64).reshape(-1, 4)
    skip = np.asarray(annotation.get("crowd", np.zeros(len(boxes), bool)), bool)
    skip = skip | np.asarray(annotation.get("ignore", np.zeros(len(boxes), bool)), bool)
    return boxes[~skip], boxes[skip]


def prepare_targets(anchors, annotations, image_hw, hi=0.7, lo=0.3):
    """Label every anchor of every image once; anchors crossing the border are ignored."""
    outside = ~inside_image(anchors.boxes, image_hw)
    out = []
    for ann in annotations:
        gts, crowd = gt_split(ann)
        a = assign_labels(anchors.boxes, gts, hi, lo, crowd)
        a.labels[outside] = IGNORE
        a.matched[outside] = -1
        pos = a.positives
        targets = encode_boxes(anchors.boxes[pos], gts[a.matched[pos]]) if len(pos) else np.zeros((0, 4))
        out.append(ImageTargets(a, targets))
    return out


@dataclass
class TrainResult:
    model: object
    optimizer: SGD
    epoch_log: list = field(default_factory=list)  # dicts: epoch, lr, total, reg, pos_cls, neg_cls, steps, seconds
    step_losses: list = field(default_factory=list)


def _batch(model, anchors, targets, batch_ids, sampler, rng):
    imgs, idxs, labs, tgts = [], [], [], []
    for n, i in enumerate(batch_ids):
        it = targets[i]
        pos, neg = sample_minibatch(it.assignment, sampler, rng)
        rows = np.searchsorted(it.assignment.positives, pos)
        idxs += [pos, neg]
        imgs += [np.full(len(pos) + len(neg), n)]
        labs += [np.full(len(pos), POSITIVE), np.full(len(neg), NEGATIVE)]
        tgts += [it.pos_targets[rows], np.zeros((len(neg), 4))]
    idx = np.concatenate(idxs)
    img = np.concatenate(imgs)
    lab = np.concatenate(labs).astype(np.int8)
    tgt = np.concatenate(tgts)
    order = np.argsort(anchors.level[idx], kind="stable")
    return img[order], idx[order], lab[order], tgt[order]


def train(model, dataset, sampler: SamplerConfig, tcfg: TrainerConfig, epochs=None,
          csv_path=None, config_hash="", on_epoch=None):
    """Train ``model`` in place on ``dataset`` (a ``data.Dataset``).

    Deterministic given ``tcfg.seed``: the epoch permutation and anchor
    sampling draw from a generator seeded with ``(seed, epoch)``.
    """
    epochs = tcfg.epochs if epochs is None else epochs
    if len(dataset) == 0:
        raise ValueError("empty training set")
    hw = dataset.images.shape[2:]
    anchors = model.anchors(hw)
    targets = prepare_targets(anchors, dataset.annotations(), hw, tcfg.iou_hi, tcfg.iou_lo)
    opt = SGD(model.named_parameters(), tcfg.momentum, tcfg.weight_decay)
    result = TrainResult(model, opt)
    nb = sampler.images_per_batch
    model.train()
    for epoch in range(epochs):
        lr = lr_at(epoch, tcfg.lr0, tcfg.lr_base, tcfg.lr_decay)
        rng = np.random.default_rng([tcfg.seed, epoch])
        perm = rng.permutation(len(dataset))
        sums = np.zeros(4)
        steps = 0
        t0 = time.perf_counter()
        for start in range(0, len(perm) - nb + 1, nb):
            ids = perm[start : start + nb]
            img, idx, lab, tgt = _batch(model, anchors, targets, ids, sampler, rng)
            step = len(result.step_losses)
            try:
                outputs = model(dataset.images[ids])
                t, o = model.pool(outputs, anchors, img, idx)
                loss, br = compute_loss(t, o, tgt, lab, nb, sampler.anchors_per_image)
            except FloatingPointError as exc:
                raise TrainingDiverged(epoch, step, str(exc)) from exc
            if not np.isfinite(br.total):
                raise TrainingDiverged(epoch, step, f"loss {br.total}")
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            result.step_losses.append(br.total)
            norm = nb * sampler.anchors_per_image
            sums += [br.total, br.reg / norm, br.pos_cls / norm, br.neg_cls / norm]
            steps += 1
        if steps == 0:
            raise ValueError(f"dataset of {len(dataset)} images is smaller than one batch of {nb}")
        mean = sums / steps
        row = {"epoch": epoch + 1, "lr": lr, "total": mean[0], "reg": mean[1], "pos_cls": mean[2],
               "neg_cls": mean[3], "steps": steps, "seconds": round(time.perf_counter() - t0, 3)}
        result.epoch_log.append(row)
        log.info("epoch %d lr %.3g loss %.5f (%.1fs)", epoch + 1, lr, mean[0], row["seconds"])
        if csv_path:
            write_loss_csv(csv_path, result.epoch_log, config_hash)
        if on_epoch:
            on_epoch(row)
    model.eval()
    return result


LOSS_FIELDS = ("epoch", "lr", "total", "reg", "pos_cls", "neg_cls", "steps", "seconds")


def write_loss_csv(path, rows, config_hash=""):
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={config_hash}\n")
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_loss_csv(path):
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(lines)]


# ------------------------------------------------------------ checkpoints

MANIFEST = "manifest.json"


def _tensor_file(kind, name):
    return f"{kind}/{name}.pft"


def save_checkpoint(path, model, optimizer=None, meta=None):
    """Write each parameter, buffer and momentum buffer as a PFT1 file plus a manifest.

    Output bytes depend only on the tensors and ``meta``.
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    groups = [("param", {n: p.data for n, p in model.named_parameters()}),
              ("buffer", dict(model.named_buffers()))]
    if optimizer is not None:
        groups.append(("momentum", optimizer.buffers))
    for kind, tensors in groups:
        os.makedirs(os.path.join(path, kind), exist_ok=True)
        for name, arr in tensors.items():
            rel = _tensor_file(kind, name)
            pft.save(os.path.join(path, rel), arr)
            entries.append({"kind": kind, "name": name, "shape": list(arr.shape), "file": rel})
    manifest = {"format": "psrpn-checkpoint/1", "meta": meta or {}, "tensors": entries}
    with open(os.path.join(path, MANIFEST), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def read_manifest(path):
    with open(os.path.join(path, MANIFEST)) as fh:
        return json.load(fh)


def load_checkpoint(path, model, optimizer=None):
    """Restore tensors written by ``save_checkpoint``; returns the manifest meta."""
    manifest = read_manifest(path)
    state, momentum = {}, {}
    for e in manifest["tensors"]:
        arr = pft.load(os.path.join(path, e["file"]))
        if list(arr.shape) != e["shape"]:
            raise pft.PFTError(f"{e['file']}: shape {arr.shape} disagrees with manifest {e['shape']}")
        (momentum if e["kind"] == "momentum" else state)[e["name"]] = arr
    model.load_state_dict(state)
    if optimizer is not None and momentum:
        for name in optimizer.buffers:
            optimizer.buffers[name] = momentum[name].astype(optimizer.buffers[name].dtype)
    return manifest["meta"]


def loss_breakdown_dict(br: LossBreakdown):
    return asdict(br)
