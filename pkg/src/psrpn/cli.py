"""Command-line entry point.

Exit codes: 0 success, 1 audit/check mismatch, 2 input error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import data as D
from .anchors import EXPECTED_640, anchor_audit
from .config import ConfigError, RunConfig, build_model
from .evaluation import evaluate, plot_report, read_proposals, write_proposals, write_report
from .heads import NAIVE_DELTA, PS_DELTA, SMOOTHER_DELTA, VARIANTS, head_param_table, table_identities
from .pft import PFTError
from .pyramid import LEVELS
from .tensor import ShapeError

log = logging.getLogger("psrpn")

EXIT_OK, EXIT_MISMATCH, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    pass


def _load_config(args):
    cfg = RunConfig.load(getattr(args, "config", None))
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.trainer.seed = seed
        cfg.model.seed = seed
    return cfg


def _emit(line=""):
    print(line, flush=True)


# ---------------------------------------------------------------- audits


def cmd_anchors_audit(args):
    cfg = _load_config(args)
    if args.size <= 0 or args.size % 64:
        raise InputError(f"--size must be a positive multiple of 64, got {args.size}")
    counts, expected = anchor_audit(args.size, args.mode)
    _emit(f"config_hash {cfg.hash()}")
    _emit(f"anchors audit size={args.size} mode={args.mode} "
          f"expected={'published' if args.size == 640 else 'brute-force enumeration'}")
    _emit(f"{'level':<6}{'count':>10}{'expected':>10}  ok")
    ok = True
    for name, c, e in zip(LEVELS, counts, expected):
        ok &= c == e
        _emit(f"{name:<6}{c:>10,}{e:>10,}  {'yes' if c == e else 'NO'}")
    _emit(f"{'total':<6}{sum(counts):>10,}{sum(expected):>10,}  {'yes' if sum(counts) == sum(expected) else 'NO'}")
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_params_audit(args):
    cfg = _load_config(args)
    rows = head_param_table(gcn_mid=args.gcn_mid, lk_width=args.lk_width)
    _emit(f"config_hash {cfg.hash()}")
    _emit(f"{'variant':<10}{'ps':<6}{'params':>12}{'published':>12}{'residual':>10}")
    for r in rows:
        if args.variant and r["variant"] != args.variant:
            continue
        if args.ps is not None and r["ps"] != args.ps:
            continue
        pub = "" if r["published"] is None else f"{r['published']:,}"
        res = "" if r["residual"] is None else f"{r['residual']:+,}"
        _emit(f"{r['variant']:<10}{'yes' if r['ps'] else 'no':<6}{r['params']:>12,}{pub:>12}{res:>10}")
    _emit()
    _emit(f"asserted deltas: naive-baseline {NAIVE_DELTA:,}; -ns minus -s {SMOOTHER_DELTA:,}; PS minus non-PS {PS_DELTA:,}")
    ok = True
    for name, ours, want in table_identities(rows):
        ok &= ours == want
        _emit(f"  {name:<28}{ours:>12,}{want:>12,}  {'ok' if ours == want else 'MISMATCH'}")
    _emit("gcn/lk residuals against the published totals are reported only (internal widths are not recoverable)")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            fh.write(f"# config_hash={cfg.hash()}\n")
            w = csv.DictWriter(fh, fieldnames=["variant", "ps", "params", "published", "residual"])
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK if ok else EXIT_MISMATCH


def cmd_gradcheck(args):
    from .gradsuite import CASES, run_suite

    cfg = _load_config(args)
    names = [n for n in CASES if not args.only or any(s in n for s in args.only)]
    if not names:
        raise InputError(f"no gradient case matches {args.only}")
    _emit(f"config_hash {cfg.hash()}")
    failed = []

    def progress(name, rows, dt):
        worst = max(r.max_rel_error for r in rows)
        ok = all(r.passed for r in rows)
        if not ok:
            failed.append(name)
        _emit(f"{name:<28} seeds={len(rows):<3} worst_rel={worst:.2e} {'pass' if ok else 'FAIL'} ({dt:.1f}s)")

    run_suite(seeds=args.seeds, names=names, tolerance=args.tolerance, progress=progress)
    _emit(f"{len(names) - len(failed)}/{len(names)} cases pass at tolerance {args.tolerance:g}")
    return EXIT_OK if not failed else EXIT_MISMATCH


# -------------------------------------------------------------- datasets


def _dataset_from_config(cfg, split):
    d = cfg.data
    if d.kind == "synth":
        if split == "train":
            return D.synth_shapes(d.train_count, d.seed, d.size)
        return D.synth_shapes(d.val_count, d.seed, d.size, start=1_000_000)
    if d.kind == "dir":
        return D.load_dataset(os.path.join(d.path, split))
    raise InputError(f"unknown data.kind {d.kind!r}")


def _load_images(path):
    """A saved dataset directory, a directory of image files, or one image file.

    Returns ``(ids, images, annotations-or-None)``; every image is padded to
    a multiple of 64.
    """
    if not os.path.exists(path):
        raise InputError(f"no such file or directory: {path}")
    if os.path.isdir(path) and os.path.exists(os.path.join(path, "annotations.json")):
        ds = D.load_dataset(path)
        return [str(r.id) for r, _ in ds.records], list(ds.images), ds
    files = [path] if os.path.isfile(path) else sorted(
        os.path.join(path, f) for f in os.listdir(path) if f.endswith((".pft", ".ppm")))
    if not files:
        raise InputError(f"no .pft or .ppm images under {path}")
    ids = [os.path.splitext(os.path.basename(f))[0] for f in files]
    return ids, [D.read_image(f) for f in files], None


def cmd_synth(args):
    cfg = _load_config(args)
    d = cfg.data
    count = args.count if args.count is not None else (d.train_count if args.split == "train" else d.val_count)
    start = 0 if args.split == "train" else 1_000_000
    ds = D.synth_shapes(count, d.seed if args.seed is None else args.seed, args.size or d.size, start=start)
    D.save_dataset(ds, args.out)
    with open(os.path.join(args.out, "provenance.json"), "w") as fh:
        json.dump({"config_hash": cfg.hash(), "split": args.split, "count": count}, fh, indent=1, sort_keys=True)
    _emit(f"config_hash {cfg.hash()}")
    _emit(f"wrote {count} images to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args):
    from .train import save_checkpoint, train

    cfg = _load_config(args)
    if args.epochs is not None:
        cfg.trainer.epochs = args.epochs
    if args.data:
        ds = D.load_dataset(args.data)
    else:
        ds = _dataset_from_config(cfg, "train")
    h = cfg.hash()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        fh.write(cfg.to_json())
    _emit(f"config_hash {h}")
    model = build_model(cfg)
    t0 = time.perf_counter()
    result = train(model, ds, cfg.sampler, cfg.trainer, csv_path=os.path.join(args.out, "loss.csv"),
                   config_hash=h, on_epoch=lambda r: _emit(
                       f"epoch {r['epoch']:>3} lr {r['lr']:.4g} loss {r['total']:.5f} ({r['seconds']:.1f}s)"))
    with open(os.path.join(args.out, "steps.csv"), "w") as fh:
        fh.write(f"# config_hash={h}\nstep,total\n")
        for i, v in enumerate(result.step_losses):
            fh.write(f"{i},{v!r}\n")
    meta = {"config": cfg.to_dict(), "config_hash": h, "epochs": cfg.trainer.epochs}
    save_checkpoint(os.path.join(args.out, "checkpoint"), model, result.optimizer, meta)
    _emit(f"trained {cfg.trainer.epochs} epochs in {time.perf_counter() - t0:.1f}s; checkpoint at "
          f"{os.path.join(args.out, 'checkpoint')}")
    return EXIT_OK


# -------------------------------------------------------------- propose


def _model_from_checkpoint(path, config_override=None):
    from .train import load_checkpoint, read_manifest

    if not os.path.exists(os.path.join(path, "manifest.json")):
        raise InputError(f"{path} is not a checkpoint directory (no manifest.json)")
    meta = read_manifest(path)["meta"]
    cfg = RunConfig.load(config_override) if config_override else RunConfig.from_dict(meta.get("config", {}))
    model = build_model(cfg)
    try:
        load_checkpoint(path, model)
    except (KeyError, ShapeError) as exc:
        raise InputError(f"checkpoint does not fit the config: {exc}") from exc
    return model, cfg


def cmd_propose(args):
    model, cfg = _model_from_checkpoint(args.checkpoint, args.config)
    ids, images, _ = _load_images(args.images)
    h = cfg.hash()
    e = cfg.eval
    props = []
    for img in images:
        padded = D.transform_test_pad(np.asarray(img, np.float32))
        props.extend(model.propose(padded[None], top_n=e.top_n, nms_iou=e.nms_iou, pre_nms_top_n=e.pre_nms_top_n))
    meta = {"config_hash": h, "checkpoint": os.path.abspath(args.checkpoint), "nms_iou": e.nms_iou, "top_n": e.top_n}
    write_proposals(args.out, ids, props, meta)
    _emit(f"config_hash {h}")
    _emit(f"wrote proposals for {len(ids)} images to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------- eval


def _load_annotations(path):
    """``{image_id: annotation arrays}`` from a dataset dir, COCO JSON, or a VOC XML directory."""
    if os.path.isdir(path) and os.path.exists(os.path.join(path, "annotations.json")):
        path = os.path.join(path, "annotations.json")
    if os.path.isfile(path):
        with open(path, "rb") as fh:
            recs = D.parse_coco(fh.read())
        return {str(r.id): D.annotation_arrays(insts) for r, insts in recs}
    if os.path.isdir(path):
        out = {}
        for f in sorted(os.listdir(path)):
            if f.endswith(".xml"):
                with open(os.path.join(path, f), "rb") as fh:
                    rec, insts = D.parse_voc(fh.read())
                out[str(rec.id)] = D.annotation_arrays(insts)
        if out:
            return out
    raise InputError(f"no annotations found at {path}")


def cmd_eval(args):
    props, manifest = read_proposals(args.proposals)
    anns = _load_annotations(args.annotations)
    missing = sorted(set(anns) - set(props))
    if missing:
        raise InputError(f"no proposals for {len(missing)} annotated images, e.g. {missing[:3]}")
    ids = sorted(anns)
    meta = {"config_hash": manifest.get("config_hash", ""), "nms_iou": manifest.get("nms_iou"),
            "proposals": os.path.abspath(args.proposals)}
    report = evaluate([props[i][0] for i in ids], [anns[i] for i in ids], meta=meta)
    write_report(report, args.out)
    _emit(f"config_hash {meta['config_hash']}")
    for k, v in report.summary().items():
        _emit(f"{k:<10} {v:.4f}" if isinstance(v, float) else f"{k:<10} {v}")
    return EXIT_OK


def cmd_plot(args):
    if not os.path.exists(os.path.join(args.report, "curves.csv")):
        raise InputError(f"{args.report} has no curves.csv")
    path = plot_report(args.report, args.out)
    _emit(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="psrpn", description="Position-sensitive region proposal networks in numpy.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON (defaults are the desk-scale setup)")
        if seed:
            sp.add_argument("--seed", type=int, default=None)

    anchors = sub.add_parser("anchors", help="anchor tools")
    asub = anchors.add_subparsers(dest="action", required=True)
    a = asub.add_parser("audit", help="per-level anchor counts against the expected table")
    a.add_argument("--size", type=int, default=640)
    a.add_argument("--mode", choices=sorted(EXPECTED_640), default="window")
    common(a, seed=False)
    a.set_defaults(func=cmd_anchors_audit)

    params = sub.add_parser("params", help="parameter-count tools")
    psub = params.add_subparsers(dest="action", required=True)
    a = psub.add_parser("audit", help="parameter counts per head variant and the exact identities")
    a.add_argument("--variant", choices=VARIANTS)
    ps = a.add_mutually_exclusive_group()
    ps.add_argument("--ps", dest="ps", action="store_true", default=None)
    ps.add_argument("--no-ps", dest="ps", action="store_false")
    a.add_argument("--gcn-mid", type=int, default=32)
    a.add_argument("--lk-width", type=int, default=16)
    a.add_argument("--csv", help="also write the table as CSV")
    common(a, seed=False)
    a.set_defaults(func=cmd_params_audit)

    a = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    a.add_argument("--seeds", type=int, default=10)
    a.add_argument("--tolerance", type=float, default=1e-4)
    a.add_argument("--only", nargs="*", help="substring filter on case names")
    common(a, seed=False)
    a.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("synth", help="write a synthetic shapes split to disk")
    a.add_argument("--out", required=True)
    a.add_argument("--split", choices=("train", "val"), default="train")
    a.add_argument("--count", type=int)
    a.add_argument("--size", type=int)
    common(a)
    a.set_defaults(func=cmd_synth)

    a = sub.add_parser("train", help="train a proposal network")
    a.add_argument("--epochs", type=int)
    a.add_argument("--out", required=True)
    a.add_argument("--data", help="saved dataset directory (default: synthetic per config)")
    common(a)
    a.set_defaults(func=cmd_train)

    a = sub.add_parser("propose", help="write ranked proposals for images")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--images", required=True, help="dataset dir, image dir, or one .pft/.ppm file")
    a.add_argument("--out", required=True)
    common(a)
    a.set_defaults(func=cmd_propose)

    a = sub.add_parser("eval", help="average recall report for a proposals directory")
    a.add_argument("--proposals", required=True)
    a.add_argument("--annotations", required=True, help="dataset dir, COCO JSON, or VOC XML directory")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_eval)

    a = sub.add_parser("plot", help="SVG recall curves from an eval report")
    a.add_argument("--report", required=True)
    a.add_argument("--out", help="SVG path (default: <report>/curves.svg)")
    a.set_defaults(func=cmd_plot)
    return p


INPUT_ERRORS = (InputError, ConfigError, D.ParseError, PFTError, ShapeError, FileNotFoundError,
                NotADirectoryError, json.JSONDecodeError, KeyError)


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except INPUT_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
