"""A short end-to-end run: synthetic shapes -> training -> proposals -> average recall.

Uses the desk-scale configuration with fewer images and epochs so it
finishes in a few minutes. Outputs land in demos/out/.

Run: python demos/04_train_propose_evaluate.py
"""
import os
import time

from psrpn.config import RunConfig, build_model
from psrpn.data import synth_shapes
from psrpn.evaluation import evaluate, plot_report, write_report
from psrpn.train import train, write_loss_csv

OUT = os.path.join(os.path.dirname(__file__), "out")
os.makedirs(OUT, exist_ok=True)

cfg = RunConfig.from_dict({"trainer": {"epochs": 4}, "data": {"train_count": 200, "val_count": 50}})
h = cfg.hash()
print(f"config hash {h}: {cfg.head.variant} head, position-sensitive={cfg.head.position_sensitive}, "
      f"{cfg.trainer.epochs} epochs")

train_set = synth_shapes(cfg.data.train_count, cfg.data.seed, cfg.data.size)
val_set = synth_shapes(cfg.data.val_count, cfg.data.seed, cfg.data.size, start=1_000_000)
n_gt = sum(len(insts) for _, insts in train_set.records)
print(f"{len(train_set)} training images with {n_gt} shapes, {len(val_set)} validation images")

model = build_model(cfg)
print(f"model has {model.n_params():,} parameters and {len(model.anchors((128, 128))):,} anchors per image")
t0 = time.perf_counter()
res = train(model, train_set, cfg.sampler, cfg.trainer,
            on_epoch=lambda r: print(f"  epoch {r['epoch']}: lr {r['lr']:.4g}, loss {r['total']:.4f}"))
write_loss_csv(os.path.join(OUT, "loss.csv"), res.epoch_log, h)
print(f"trained in {time.perf_counter() - t0:.0f}s")

props = []
for i in range(0, len(val_set), cfg.eval.batch):
    props += model.propose(val_set.images[i:i + cfg.eval.batch], top_n=cfg.eval.top_n, nms_iou=cfg.eval.nms_iou)
report = evaluate([p.boxes for p in props], val_set.annotations(), meta={"config_hash": h})
for k, v in report.summary().items():
    print(f"  {k:<10} {v:.3f}" if isinstance(v, float) else f"  {k:<10} {v}")
write_report(report, os.path.join(OUT, "report"))
print("recall curves:", plot_report(os.path.join(OUT, "report")))
print("\nFour epochs on 200 images only shows the pipeline working; the 20-epoch,")
print("1000-image run lives in tests/test_acceptance.py (criterion 7).")
