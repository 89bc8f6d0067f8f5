"""Command-line entry point: ``refgroup <command> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import metrics_csv
from .synth import vocabulary

log = logging.getLogger("refgroup")


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    for pair in getattr(args, "set", None) or []:
        key, _, value = pair.partition("=")
        cfg.set(key.strip(), value.strip())
    if args.seed is not None:
        cfg = cfg.replace(train__seed=args.seed)
    return cfg.validate()


def cmd_train(args) -> int:
    from .harness import train
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    res = train(cfg, out, progress=print if args.verbose else None)
    print(f"best val mIoU {res.best_val_miou:.4f} at epoch {res.best_epoch}; checkpoint {res.checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .harness import evaluate
    res = evaluate(args.ckpt, args.split)
    text = metrics_csv({args.split: res.metrics})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(text)
    sys.stdout.write(text)
    print(f"referent accuracy {res.referent_accuracy:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .harness import ABLATIONS, run_ablation_seeds
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.train.seed]
    variants = args.variants.split(",") if args.variants else list(ABLATIONS)
    res = run_ablation_seeds(cfg, seeds, args.out, variants, progress=print)
    for name, rep in res.items():
        print(f"{name}\t{rep.miou:.4f}")
    return 0


def cmd_gradcheck(args) -> int:
    from .harness import model_gradcheck
    seed = args.seed or 0
    n_probe = 20 if args.full else 5
    checks = model_gradcheck(seed=seed, n_probe=n_probe)
    worst = 0.0
    for c in checks:
        worst = max(worst, c.max_rel_error)
        print(f"{c.group:24s} probes={c.n_probed:3d} max_rel_err={c.max_rel_error:.3e}")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_dump_masks(args) -> int:
    from .harness import dump_masks
    files = dump_masks(args.ckpt, args.split, args.out, limit=args.limit)
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def write_ppm(path, image: np.ndarray):
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def cmd_gen_data(args) -> int:
    from .harness import build_splits, write_pgm
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vocab = vocabulary()
    vocab.save(out / "vocab.txt")
    for split, samples in build_splits(cfg).items():
        d = out / split
        d.mkdir(exist_ok=True)
        rows = ["index\tuid\texpression\treferent_category"]
        for i, s in enumerate(samples):
            write_ppm(d / f"{i:04d}_image.ppm", s.image)
            write_pgm(d / f"{i:04d}_mask.pgm", s.gt_mask.astype(np.uint8) * 255)
            rows.append(f"{i}\t{s.uid}\t{' '.join(s.words)}\t{s.referent_category}")
        (d / "expressions.tsv").write_text("\n".join(rows) + "\n")
        print(f"{split}: {len(samples)} samples")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refgroup", description="Referring segmentation with grouped query tokens.")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="config file of section.key = value lines")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("train", help="train a model and write train.log + model.ckpt")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", help="directory for metrics.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="run the ablation ladder and write ablation.csv")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seeds", help="comma-separated seeds to average over")
    sp.add_argument("--variants", help="comma-separated subset of variants")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    sp.add_argument("--full", action="store_true", help="20 probes per parameter group instead of 5")
    sp.add_argument("--tol", type=float, default=1e-3)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("dump-masks", help="write predicted, ground-truth and grouping maps as PGM")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", required=True)
    sp.add_argument("--limit", type=int, default=None)
    sp.set_defaults(func=cmd_dump_masks)

    sp = sub.add_parser("gen-data", help="write the synthetic splits as PPM/PGM files")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
