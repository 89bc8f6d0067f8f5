"""Train a small model on generated scenes, then look at what it predicts.

By default the data is shrunk and the batch size cut to 4, so the model gets
enough optimizer steps to learn something in well under a minute. Pass --full
for the standard desk-scale run (a few minutes on one core).
"""
import argparse
from pathlib import Path

from refgroup.config import RunConfig
from refgroup.harness import dump_masks, evaluate, train

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
parser.add_argument("--out", default="demo_run")
parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
args = parser.parse_args()

cfg = RunConfig()
if not args.full:
    cfg = cfg.replace(data__n_train=200, data__n_val=50, data__n_test=50, train__epochs=10, train__batch_size=4)
for item in args.set:
    key, value = item.split("=", 1)
    cfg.set(key, value)
cfg.validate()

out = Path(args.out)
print(cfg.to_text())
res = train(cfg, out, progress=print)
print(f"\nbest val mIoU {res.best_val_miou:.3f} at epoch {res.best_epoch}")

ev = evaluate(out / "model.ckpt", "test")
m = ev.metrics
print(f"test: mIoU {m.miou:.3f}  oIoU {m.oiou:.3f}  P@0.5 {m.p50:.2f}  P@0.7 {m.p70:.2f}  P@0.9 {m.p90:.2f}")
print(f"referent token picked correctly: {ev.referent_accuracy:.2%}")

files = dump_masks(out / "model.ckpt", "test", out / "masks", limit=8)
print(f"\nwrote {len(files)} PGM files to {out / 'masks'} (ground truth, prediction, token groups)")
