"""Switch mechanisms off one at a time and compare validation mIoU.

Each variant differs from the full model by config flags only. With --seeds
the results are averaged, which is what the trend check in the test suite
does. Expect roughly two minutes per run at the default size.
"""
import argparse

from refgroup.config import RunConfig
from refgroup.harness import ABLATIONS, run_ablation_seeds

parser = argparse.ArgumentParser()
parser.add_argument("--seeds", type=int, nargs="+", default=[0])
parser.add_argument("--variants", nargs="+", default=list(ABLATIONS))
parser.add_argument("--quick", action="store_true", help="tiny data and 3 epochs, for a smoke run")
parser.add_argument("--out", default="demo_ablation")
args = parser.parse_args()

cfg = RunConfig()
if args.quick:
    cfg = cfg.replace(data__n_train=60, data__n_val=20, data__n_test=20, train__epochs=3)

means = run_ablation_seeds(cfg, args.seeds, args.out, args.variants,
                           progress=lambda line: print("   ", line))
print(f"\n{'variant':<22}{'mIoU':>8}{'oIoU':>8}{'P@0.5':>8}")
for name, m in means.items():
    print(f"{name:<22}{m.miou:>8.3f}{m.oiou:>8.3f}{m.p50:>8.3f}")
