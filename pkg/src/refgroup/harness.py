"""Training, evaluation, ablation ladder and mask dumps on synthetic scenes."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .metrics import MetricReport, compute_metrics, metrics_csv
from .model import RefSegModel
from .params import CheckpointError, adamw_step, read_checkpoint, save_checkpoint
from .rng import Rng
from .synth import SHAPES, SyntheticSample, augment, generate_dataset, make_generalization_split

log = logging.getLogger(__name__)

LOG_HEADER = "epoch\tl_cl\tl_seg\ttrain_miou\tval_miou"


class NonFiniteLossError(FloatingPointError):
    pass


# ---- data ------------------------------------------------------------------

def build_splits(cfg: RunConfig) -> dict[str, list[SyntheticSample]]:
    """Named sample lists for a config. Unseen categories trigger the generalisation protocol."""
    d, seed = cfg.data, cfg.train.seed
    kw = dict(image_size=d.image_size, min_objects=d.min_objects, max_objects=d.max_objects)
    if not d.unseen:
        return {
            "train": generate_dataset(seed, d.n_train, stream="train", **kw),
            "val": generate_dataset(seed, d.n_val, stream="val", **kw),
            "test": generate_dataset(seed, d.n_test, stream="test", **kw),
        }
    # pool sized so the seen-only train split still has ~n_train samples
    n_unseen = len(set(d.unseen))
    keep = (len(SHAPES) - n_unseen) / len(SHAPES)
    n_pool = int(math.ceil(d.n_train / (0.7 * keep)))
    pool = generate_dataset(seed, n_pool, stream="pool", **kw)
    spec = make_generalization_split(pool, d.unseen, seed=seed)
    out = {name: [pool[i] for i in idx] for name, idx in spec.splits.items()}
    out["val"] = out["val-seen"]
    return out


def batch_arrays(samples):
    return (np.stack([s.image for s in samples]), np.stack([s.expression for s in samples]),
            np.stack([s.gt_mask for s in samples]))


# ---- training ----------------------------------------------------------------

@dataclass
class EvalResult:
    metrics: MetricReport
    referent_accuracy: float
    preds: list


def evaluate_model(model: RefSegModel, samples, batch_size: int = 50) -> EvalResult:
    preds, correct = [], []
    for s in range(0, len(samples), batch_size):
        chunk = samples[s:s + batch_size]
        imgs, exprs, gts = batch_arrays(chunk)
        out = model.forward(imgs, exprs, None, train_mode=False)
        masks = model.predict(out, gts.shape[-2], gts.shape[-1])
        preds.extend(list(masks))
        scores = model.referent_scores(out)
        if scores is not None:
            correct.extend(list(scores.argmax(axis=-1) == 0))
    rep = compute_metrics(preds, [x.gt_mask for x in samples])
    acc = float(np.mean(correct)) if correct else float("nan")
    return EvalResult(rep, acc, preds)


def _check_finite(report):
    parts = {"l_cl": report.l_cl.data}
    parts.update({f"l_seg[{k}]": t.data for k, t in enumerate(report.l_seg_per_stage)})
    for name, v in parts.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteLossError(f"non-finite loss term {name}")


def learning_rate(tc, step: int, n_steps: int) -> float:
    if tc.schedule == "constant" or n_steps <= 1:
        return tc.lr
    return tc.lr * 0.5 * (1.0 + math.cos(math.pi * step / n_steps))


def _fmt_row(epoch, l_cl, l_seg, tr, va) -> str:
    return f"{epoch}\t{l_cl:.6f}\t{l_seg:.6f}\t{tr:.6f}\t{va:.6f}"


@dataclass
class TrainResult:
    model: RefSegModel
    log_lines: list[str]
    best_val_miou: float
    best_epoch: int
    checkpoint: Path | None
    splits: dict


def train(config: RunConfig, out_dir=None, splits=None, progress=None) -> TrainResult:
    """Minibatch AdamW on the summed loss; keeps the best-on-val parameters.

    Writes ``train.log`` and ``model.ckpt`` (best val mIoU) to ``out_dir`` when given.
    """
    cfg = config.validate()
    tc = cfg.train
    splits = splits or build_splits(cfg)
    train_set, val_set = splits["train"], splits["val"]
    model = RefSegModel(cfg)
    shuffle = Rng(tc.seed, "shuffle")
    noise = Rng(tc.seed, "noise")
    aug = Rng(tc.seed, "augment")
    n_steps = tc.epochs * math.ceil(len(train_set) / tc.batch_size)
    step = 0
    lines = [LOG_HEADER]
    best = (-1.0, -1, None)
    for epoch in range(tc.epochs):
        order = shuffle.child(f"epoch{epoch}").permutation(len(train_set))
        sums = np.zeros(2)
        train_preds, train_gts = [], []
        for b, start in enumerate(range(0, len(order), tc.batch_size)):
            batch = [train_set[i] for i in order[start:start + tc.batch_size]]
            imgs, exprs, gts = batch_arrays(batch)
            if tc.augment == "on":
                arng = aug.child(f"e{epoch}b{b}")
                imgs, exprs, gts = map(np.stack, zip(*(augment(*x, arng) for x in zip(imgs, exprs, gts))))
            out = model.forward(imgs, exprs, noise.child(f"e{epoch}b{b}"), train_mode=True)
            rep = model.losses(out, gts)
            _check_finite(rep)
            loss = rep.l_total.mean()
            model.store.zero_grad()
            loss.backward()
            lr = learning_rate(tc, step, n_steps)
            step += 1
            adamw_step(model.store, lr, (tc.beta1, tc.beta2), tc.eps, tc.weight_decay, allow_missing=True)
            f = rep.as_floats()
            sums += np.array([f["l_cl"], f["l_seg"]]) * len(batch)
            train_preds.extend(model.predict(out, gts.shape[-2], gts.shape[-1]))
            train_gts.extend(gts)
        sums /= len(train_set)
        train_miou = compute_metrics(train_preds, train_gts).miou
        val_miou = evaluate_model(model, val_set).metrics.miou
        lines.append(_fmt_row(epoch, sums[0], sums[1], train_miou, val_miou))
        if progress:
            progress(lines[-1])
        if val_miou > best[0]:
            best = (val_miou, epoch, model.store.state_dict())
    if best[2] is not None:
        model.store.load_state_dict(best[2])
    ckpt = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "train.log").write_text("\n".join(lines) + "\n")
        ckpt = out_dir / "model.ckpt"
        save_model(model, ckpt, best_epoch=best[1])
    return TrainResult(model, lines, best[0], best[1], ckpt, splits)


def save_model(model: RefSegModel, path, **meta):
    info = {"config": model.config.to_single_line(), "vocab_size": str(model.vocab_size)}
    info.update({k: str(v) for k, v in meta.items()})
    save_checkpoint(path, model.store, info)


def load_model(path) -> RefSegModel:
    meta, state = read_checkpoint(path)
    if "config" not in meta:
        raise CheckpointError(f"{path}: checkpoint carries no config")
    cfg = RunConfig.from_single_line(meta["config"])
    model = RefSegModel(cfg, vocab_size=int(meta.get("vocab_size", 0)) or None)
    model.store.load_state_dict(state)
    return model


def evaluate(checkpoint, split: str = "test", samples=None) -> EvalResult:
    model = load_model(checkpoint)
    if samples is None:
        samples = build_splits(model.config)[split]
    return evaluate_model(model, samples)


# ---- ablation ladder ---------------------------------------------------------

ABLATIONS = {
    "1-baseline": {"model.tokens": "off", "model.stages": "single", "loss.contrastive": "off"},
    "2-one-token": {"model.tokens": "single", "model.grouping": "none", "model.stages": "single",
                    "loss.contrastive": "off"},
    "3-n-tokens": {"model.grouping": "none", "model.stages": "single", "loss.contrastive": "off"},
    "4-soft-grouping": {"model.grouping": "soft", "model.stages": "single"},
    "5-hard-assignment": {"model.stages": "single"},
    "6-parallel": {"decoder.mode": "parallel"},
    "7-full": {},
    "9-dot-affinity": {"model.affinity": "dot"},
    "10-fixed-tau": {"tau.mode": "fixed:0.1"},
}


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    # ladder flags override the mechanism switches and nothing else
    full = {"model.tokens": "full", "model.grouping": "hard", "model.stages": "multi",
            "model.affinity": "cosine", "loss.contrastive": "on", "decoder.mode": "consecutive",
            "tau.mode": "learnable"}
    full.update(ABLATIONS[variant])
    return base.replace(**{k.replace(".", "__"): v for k, v in full.items()})


def run_ablation(config: RunConfig, out_dir=None, variants=None, progress=None) -> dict[str, EvalResult]:
    """Train and evaluate every ladder variant on the validation split; optionally write ablation.csv."""
    results = {}
    splits = build_splits(config)
    for name in variants or ABLATIONS:
        cfg = variant_config(config, name)
        res = train(cfg, None, splits=splits)
        results[name] = evaluate_model(res.model, splits["val"])
        if progress:
            progress(f"{name}\t{results[name].metrics.miou:.4f}")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "ablation.csv").write_text(metrics_csv({k: v.metrics for k, v in results.items()}))
    return results


def mean_report(reports: list[MetricReport]) -> MetricReport:
    """Per-metric average over runs; ``n`` counts every evaluated sample."""
    keys = ("miou", "oiou", "p50", "p70", "p90")
    avg = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    return MetricReport(sum((r.ious for r in reports), []), n=sum(r.n for r in reports), **avg)


def run_ablation_seeds(config: RunConfig, seeds, out_dir=None, variants=None, progress=None) -> dict[str, MetricReport]:
    """The ladder repeated per seed; writes ``ablation_seed<s>.csv`` per seed and ``ablation.csv`` of means."""
    per_seed = {}
    for seed in seeds:
        sub = Path(out_dir) if out_dir is not None else None
        res = run_ablation(config.replace(train__seed=seed), None, variants, progress)
        per_seed[seed] = {k: v.metrics for k, v in res.items()}
        if sub is not None:
            sub.mkdir(parents=True, exist_ok=True)
            (sub / f"ablation_seed{seed}.csv").write_text(metrics_csv(per_seed[seed]))
    names = list(per_seed[seeds[0]])
    means = {name: mean_report([per_seed[s][name] for s in seeds]) for name in names}
    if out_dir is not None:
        (Path(out_dir) / "ablation.csv").write_text(metrics_csv(means))
    return means


# ---- global gradient check ---------------------------------------------------

def param_group(name: str) -> str:
    """Component a parameter belongs to, e.g. ``decoder.layer3`` or ``tokens``."""
    return ".".join(name.split(".")[:2])


@dataclass
class GroupCheck:
    group: str
    n_probed: int
    max_rel_error: float


def model_gradcheck(seed: int = 0, image_size: int = 32, n_tokens: int = 4, n_probe: int = 20,
                    config: RunConfig | None = None) -> list[GroupCheck]:
    """Total loss of the full model against central differences, per parameter group.

    Runs in training mode so Gumbel noise and the straight-through path are
    exercised; the sampled noise and argmax one-hots are replayed while probing.
    """
    from .gradcheck import gradcheck
    cfg = (config or RunConfig()).replace(data__image_size=image_size, model__n_tokens=n_tokens,
                                          train__seed=seed)
    model = RefSegModel(cfg)
    data_rng = Rng(seed, "gradcheck")
    sample = generate_dataset(seed, 1, image_size=image_size, stream="gradcheck")[0]
    # mild noise keeps activations off the ReLU kink at exactly zero
    image = 0.8 * sample.image + 0.2 * data_rng.uniform(sample.image.shape)
    imgs, exprs, gts = image[None], sample.expression[None], sample.gt_mask[None]

    def loss():
        out = model.forward(imgs, exprs, Rng(seed, "gradcheck-noise"), train_mode=True)
        return model.losses(out, gts).l_total.sum()

    groups: dict[str, list[str]] = {}
    for name, _ in model.store:
        groups.setdefault(param_group(name), []).append(name)
    pick = data_rng.child("probe")
    indices = {}
    for g, names in groups.items():
        sizes = np.array([model.store[n].size for n in names])
        flat = pick.choice(int(sizes.sum()), size=min(n_probe, int(sizes.sum())), replace=False)
        owner = np.searchsorted(np.cumsum(sizes), flat, side="right")
        offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        for k, n in enumerate(names):
            indices[n] = flat[owner == k] - offsets[k]
    inputs = {n: model.store[n] for n in indices if len(indices[n])}
    results = {r.name: r for r in gradcheck(loss, inputs, indices=indices)}
    out = []
    for g, names in groups.items():
        rs = [results[n] for n in names if n in results]
        out.append(GroupCheck(g, sum(r.indices.size for r in rs), max(r.max_rel_error for r in rs)))
    return out


# ---- mask dumps --------------------------------------------------------------

def write_pgm(path, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos)
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary graymap")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit graymaps are supported")
    pos += 1
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def grouping_map(out, sample_index: int, h: int, w: int) -> np.ndarray:
    """Token index x 32 per pixel, from the final stage's assignment, resized to (h, w)."""
    from .decoder import nearest_resize
    st = out.state
    stage = st.final_stage
    if stage not in st.A:
        return np.zeros((h, w), np.uint8)
    hs, ws = st.D[stage].shape[-3:-1]
    labels = st.A[stage].labels()[sample_index].reshape(hs, ws)
    return (nearest_resize(labels, h, w) * 32).clip(0, 255).astype(np.uint8)


def dump_masks(checkpoint, split: str = "test", out_dir="masks", samples=None, limit=None) -> list[Path]:
    """Write ``{i:04d}_pred.pgm``, ``_gt.pgm`` and ``_groups.pgm`` per sample."""
    model = load_model(checkpoint)
    if samples is None:
        samples = build_splits(model.config)[split]
    if limit is not None:
        samples = samples[:limit]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for i, s in enumerate(samples):
        imgs, exprs, gts = batch_arrays([s])
        out = model.forward(imgs, exprs, None, train_mode=False)
        pred = model.predict(out, *s.gt_mask.shape)[0]
        for tag, arr in (("pred", pred.astype(np.uint8) * 255), ("gt", s.gt_mask.astype(np.uint8) * 255),
                         ("groups", grouping_map(out, 0, *s.gt_mask.shape))):
            p = out_dir / f"{i:04d}_{tag}.pgm"
            write_pgm(p, arr)
            written.append(p)
    return written
