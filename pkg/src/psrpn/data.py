"""Annotations (COCO JSON, VOC XML), image transforms, and the synthetic shapes set."""
from __future__ import annotations

import json
import logging
import os
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field

import numpy as np

from . import pft

log = logging.getLogger(__name__)

STRIDE_MULTIPLE = 64


class ParseError(ValueError):
    """Malformed annotation input; the message names the offending path."""


@dataclass
class GtInstance:
    box: np.ndarray  # (x0, y0, x1, y1), half-open pixels
    category: object = 1
    crowd: bool = False
    ignore: bool = False  # VOC "difficult"
    area: float | None = None

    def __post_init__(self):
        self.box = np.asarray(self.box, dtype=np.float64)
        if self.area is None:
            self.area = float((self.box[2] - self.box[0]) * (self.box[3] - self.box[1]))


@dataclass
class ImageRecord:
    id: object
    width: int
    height: int
    file_name: str = ""
    scale: tuple = (1.0, 1.0)  # (sx, sy)
    offset: tuple = (0.0, 0.0)  # subtracted after scaling: (ox, oy); crops give positive offsets
    out_size: tuple | None = None  # (width, height) after the transform

    def forward_boxes(self, boxes):
        """Original image coordinates -> transformed coordinates."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        sx, sy = self.scale
        ox, oy = self.offset
        return b * [sx, sy, sx, sy] - [ox, oy, ox, oy]

    def inverse_boxes(self, boxes):
        """Transformed coordinates -> original image coordinates."""
        b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        sx, sy = self.scale
        ox, oy = self.offset
        return (b + [ox, oy, ox, oy]) / [sx, sy, sx, sy]


def annotation_arrays(instances):
    """Evaluation-ready dict of arrays for a list of ``GtInstance``."""
    return {
        "boxes": np.array([g.box for g in instances], dtype=np.float64).reshape(-1, 4),
        "crowd": np.array([g.crowd for g in instances], dtype=bool),
        "ignore": np.array([g.ignore for g in instances], dtype=bool),
        "areas": np.array([g.area for g in instances], dtype=np.float64),
        "categories": [g.category for g in instances],
    }


# ------------------------------------------------------------------ COCO


def _require(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"missing required key {path}.{key}")
    return obj[key]


def parse_coco(blob, stats=None):
    """Parse a COCO-style document into ``[(ImageRecord, [GtInstance, ...]), ...]``.

    ``bbox`` is ``[x, y, w, h]``; annotations with negative width or height
    are skipped and counted in ``stats["rejected"]`` when a dict is given.
    """
    try:
        doc = json.loads(blob)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"invalid JSON: {exc}") from exc
    images = _require(doc, "images", "$")
    anns = _require(doc, "annotations", "$")
    if not isinstance(images, list) or not isinstance(anns, list):
        raise ParseError("$.images and $.annotations must be arrays")
    records, by_id = [], {}
    for i, im in enumerate(images):
        path = f"$.images[{i}]"
        rec = ImageRecord(
            id=_require(im, "id", path),
            width=int(_require(im, "width", path)),
            height=int(_require(im, "height", path)),
            file_name=str(im.get("file_name", "")),
        )
        by_id[rec.id] = (rec, [])
        records.append(by_id[rec.id])
    rejected = 0
    for i, a in enumerate(anns):
        path = f"$.annotations[{i}]"
        image_id = _require(a, "image_id", path)
        bbox = _require(a, "bbox", path)
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise ParseError(f"{path}.bbox must be [x, y, w, h]")
        if image_id not in by_id:
            raise ParseError(f"{path}.image_id {image_id!r} has no image entry")
        x, y, w, h = (float(v) for v in bbox)
        if w < 0 or h < 0:
            rejected += 1
            continue
        by_id[image_id][1].append(GtInstance(
            box=[x, y, x + w, y + h],
            category=a.get("category_id", 1),
            crowd=bool(a.get("iscrowd", 0)),
            area=float(a["area"]) if "area" in a else None,
        ))
    if rejected:
        log.warning("skipped %d annotations with negative size", rejected)
    if stats is not None:
        stats["rejected"] = stats.get("rejected", 0) + rejected
    return records


def emit_coco(records):
    """Inverse of ``parse_coco`` (bytes, deterministic key order)."""
    images, anns = [], []
    for rec, insts in records:
        im = {"id": rec.id, "width": rec.width, "height": rec.height}
        if rec.file_name:
            im["file_name"] = rec.file_name
        images.append(im)
        for g in insts:
            x0, y0, x1, y1 = (float(v) for v in g.box)
            anns.append({
                "id": len(anns) + 1, "image_id": rec.id, "bbox": [x0, y0, x1 - x0, y1 - y0],
                "category_id": g.category, "iscrowd": int(g.crowd), "area": float(g.area),
            })
    return json.dumps({"images": images, "annotations": anns}, indent=1, sort_keys=True).encode()


# ------------------------------------------------------------------- VOC


def parse_voc(blob):
    """Parse one VOC XML annotation into ``(ImageRecord, [GtInstance, ...])``.

    VOC corners are 1-based inclusive; they become 0-based half-open.
    ``difficult`` objects are flagged ``ignore`` (not crowd).
    """
    try:
        root = ET.fromstring(blob)
    except ET.ParseError as exc:
        raise ParseError(f"invalid XML: {exc}") from exc

    def text(node, tag, path):
        child = node.find(tag)
        if child is None or child.text is None:
            raise ParseError(f"missing required element {path}/{tag}")
        return child.text.strip()

    size = root.find("size")
    if size is None:
        raise ParseError("missing required element annotation/size")
    rec = ImageRecord(
        id=(root.findtext("filename") or "").rsplit(".", 1)[0],
        width=int(text(size, "width", "annotation/size")),
        height=int(text(size, "height", "annotation/size")),
        file_name=root.findtext("filename") or "",
    )
    insts = []
    for i, obj in enumerate(root.findall("object")):
        path = f"annotation/object[{i}]"
        bb = obj.find("bndbox")
        if bb is None:
            raise ParseError(f"missing required element {path}/bndbox")
        try:
            xmin, ymin, xmax, ymax = (float(text(bb, t, path + "/bndbox")) for t in ("xmin", "ymin", "xmax", "ymax"))
        except ValueError as exc:
            raise ParseError(f"{path}/bndbox: {exc}") from exc
        insts.append(GtInstance(
            box=[xmin - 1, ymin - 1, xmax, ymax],
            category=text(obj, "name", path),
            ignore=(obj.findtext("difficult") or "0").strip() == "1",
        ))
    return rec, insts


def emit_voc(rec, insts):
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = rec.file_name or f"{rec.id}.jpg"
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(rec.width)
    ET.SubElement(size, "height").text = str(rec.height)
    ET.SubElement(size, "depth").text = "3"
    for g in insts:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = str(g.category)
        ET.SubElement(obj, "difficult").text = "1" if g.ignore else "0"
        bb = ET.SubElement(obj, "bndbox")
        x0, y0, x1, y1 = g.box
        for tag, v in (("xmin", x0 + 1), ("ymin", y0 + 1), ("xmax", x1), ("ymax", y1)):
            ET.SubElement(bb, tag).text = f"{v:g}"
    return ET.tostring(root)


# ------------------------------------------------------------ transforms


def _resize_matrix(n_in, n_out):
    """Half-pixel-centred linear interpolation matrix (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    ratio = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * ratio - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        m[i, lo] += 1 - (src - lo)
        m[i, hi] += src - lo
    return m


def resize(image, out_hw):
    """Bilinear resize of a (C, H, W) float image."""
    c, h, w = image.shape
    oh, ow = out_hw
    if (oh, ow) == (h, w):
        return image.copy()
    out = _resize_matrix(h, oh) @ image.astype(np.float64) @ _resize_matrix(w, ow).T
    return out.astype(image.dtype)


def _apply_boxes(rec, insts, clip_wh):
    boxes = rec.forward_boxes([g.box for g in insts]) if insts else np.zeros((0, 4))
    w, h = clip_wh
    out = []
    for g, b in zip(insts, boxes):
        cb = np.array([max(b[0], 0), max(b[1], 0), min(b[2], w), min(b[3], h)])
        if cb[2] <= cb[0] or cb[3] <= cb[1]:
            continue
        sx, sy = rec.scale
        area = g.area * sx * sy if np.array_equal(cb, b) else None
        out.append(GtInstance(cb, g.category, g.crowd, g.ignore, area))
    return out


def transform_train(image, insts, mode="voc-640", seed=0, image_id=0):
    """Training-time resize/pad or resize/crop.

    ``voc-640``: long side to 640, zero-pad the short side to 640x640.
    ``coco-768``: short side to 768, random crop of the long side to
    768x768. Boxes are scaled and shifted; boxes falling entirely outside a
    crop are dropped and partial ones clipped.

    Returns ``(image, instances, ImageRecord)``.
    """
    c, h, w = image.shape
    if mode == "voc-640":
        target = 640
        s = target / max(h, w)
    elif mode == "coco-768":
        target = 768
        s = target / min(h, w)
    else:
        raise ValueError(f"unknown transform mode {mode!r}")
    oh, ow = max(1, round(h * s)), max(1, round(w * s))
    resized = resize(image, (oh, ow))
    rec = ImageRecord(image_id, w, h, scale=(ow / w, oh / h), out_size=(target, target))
    if mode == "voc-640":
        out = np.zeros((c, target, target), dtype=image.dtype)
        out[:, :oh, :ow] = resized
    else:
        rng = np.random.default_rng(seed)
        oy = int(rng.integers(0, oh - target + 1))
        ox = int(rng.integers(0, ow - target + 1))
        out = resized[:, oy : oy + target, ox : ox + target].copy()
        rec.offset = (float(ox), float(oy))
    return out, _apply_boxes(rec, insts, (target, target)), rec


def padded_size(n, multiple=STRIDE_MULTIPLE):
    return -(-n // multiple) * multiple


def transform_test_pad(image, multiple=STRIDE_MULTIPLE):
    """Zero-pad bottom/right so both sides are multiples of ``multiple``."""
    c, h, w = image.shape
    out = np.zeros((c, padded_size(h, multiple), padded_size(w, multiple)), dtype=image.dtype)
    out[:, :h, :w] = image
    return out


# --------------------------------------------------------- image files


def read_ppm(path):
    """Binary PPM (P6, maxval <= 255) -> float32 (3, H, W) in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        end = pos
        while not blob[end : end + 1].isspace():
            end += 1
        tokens.append(blob[pos:end])
        pos = end
    if tokens[0] != b"P6":
        raise ParseError(f"{path}: only binary P6 PPM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos + 1)
    return (data.reshape(h, w, 3).transpose(2, 0, 1) / float(maxval)).astype(np.float32)


def write_ppm(path, image):
    c, h, w = image.shape
    px = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(px.tobytes())


def read_image(path):
    if path.endswith(".ppm"):
        return read_ppm(path)
    arr = pft.load(path)
    return arr[0] if arr.ndim == 4 else arr


# ------------------------------------------------------- synthetic set


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    records: list = field(default_factory=list)  # [(ImageRecord, [GtInstance])]

    def __len__(self):
        return len(self.images)

    def annotations(self):
        return [annotation_arrays(insts) for _, insts in self.records]


_SIZE_RANGES = {"small": (8, 31), "medium": (32, 95), "large": (97, 124)}


def _sample_box(rng, size, stratum):
    lo, hi = _SIZE_RANGES[stratum]
    hi = min(hi, size - 4)
    for _ in range(100):
        s = rng.uniform(lo, hi)
        r = np.exp(rng.uniform(-np.log(2.2), np.log(2.2)))
        bw, bh = int(round(s * np.sqrt(r))), int(round(s / np.sqrt(r)))
        if not (4 <= bw <= size - 2 and 4 <= bh <= size - 2):
            continue
        area = bw * bh
        ok = {"small": area < 32**2, "medium": 32**2 <= area < 96**2, "large": area >= 96**2}[stratum]
        if ok:
            x0 = int(rng.integers(0, size - bw + 1))
            y0 = int(rng.integers(0, size - bh + 1))
            return np.array([x0, y0, x0 + bw, y0 + bh], dtype=np.float64)
    return None


def _background(rng, size):
    coarse = rng.uniform(0.25, 0.75, (3, 9, 9))
    img = resize(coarse, (size, size))
    img += rng.normal(0, 0.06, (3, size, size))
    return img


def synth_image(seed, index, size=128):
    """One image with 1-8 filled rectangles/ellipses on textured noise."""
    rng = np.random.default_rng([seed, index])
    img = _background(rng, size)
    n = int(rng.integers(1, 9))
    boxes = []
    have_large = False
    for _ in range(n):
        stratum = rng.choice(["small", "medium", "large"], p=[0.45, 0.4, 0.15])
        if stratum == "large" and (have_large or size < 128):
            stratum = "medium"
        for _attempt in range(30):
            b = _sample_box(rng, size, stratum)
            if b is None:
                break
            if all(_overlap_frac(b, o) <= 0.25 for o in boxes):
                boxes.append(b)
                have_large |= stratum == "large"
                break
    if not boxes:
        boxes.append(np.array([size // 4, size // 4, size // 4 + 24, size // 4 + 20], dtype=np.float64))
    # draw big shapes first so small ones stay visible
    boxes.sort(key=lambda b: -(b[2] - b[0]) * (b[3] - b[1]))
    insts = []
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for b in boxes:
        x0, y0, x1, y1 = (int(v) for v in b)
        color = rng.uniform(0, 1, 3)
        while np.abs(color - 0.5).max() < 0.3:
            color = rng.uniform(0, 1, 3)
        ellipse = rng.random() < 0.5
        if ellipse:
            cx, cy, rx, ry = (x0 + x1) / 2, (y0 + y1) / 2, (x1 - x0) / 2, (y1 - y0) / 2
            mask = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1
            ys, xs = np.nonzero(mask)
            tight = np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64)
        else:
            mask = np.zeros((size, size), bool)
            mask[y0:y1, x0:x1] = True
            tight = b.copy()
        shade = color[:, None] + rng.normal(0, 0.03, (3, int(mask.sum())))
        img[:, mask] = shade
        insts.append(GtInstance(tight, category=2 if ellipse else 1))
    img = np.clip(img, 0, 1).astype(np.float32)
    return img, insts


def _overlap_frac(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def synth_shapes(count, seed=0, size=128, start=0):
    """Deterministic synthetic dataset; image i depends only on (seed, start + i)."""
    if size % STRIDE_MULTIPLE:
        raise ValueError(f"synthetic image size must be a multiple of {STRIDE_MULTIPLE}")
    images = np.empty((count, 3, size, size), dtype=np.float32)
    records = []
    for i in range(count):
        img, insts = synth_image(seed, start + i, size)
        images[i] = img
        records.append((ImageRecord(start + i, size, size, file_name=f"{start + i:06d}.pft"), insts))
    return Dataset(images, records)


def save_dataset(ds: Dataset, path):
    """Directory of per-image PFT1 tensors plus ``annotations.json`` (COCO style)."""
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    for img, (rec, _) in zip(ds.images, ds.records):
        pft.save(os.path.join(path, "images", rec.file_name), img)
    with open(os.path.join(path, "annotations.json"), "wb") as fh:
        fh.write(emit_coco(ds.records))


def load_dataset(path):
    with open(os.path.join(path, "annotations.json"), "rb") as fh:
        records = parse_coco(fh.read())
    images = [read_image(os.path.join(path, "images", rec.file_name)) for rec, _ in records]
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ValueError(f"dataset images differ in size: {sorted(shapes)}")
    return Dataset(np.stack(images).astype(np.float32), records)
