"""Segmentation metrics: per-sample IoU, mIoU, oIoU and precision at IoU thresholds."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError

THRESHOLDS = (0.5, 0.7, 0.9)
CSV_HEADER = ["split", "n", "miou", "oiou", "p50", "p70", "p90"]


@dataclass
class MetricReport:
    ious: list[float]
    miou: float
    oiou: float
    p50: float
    p70: float
    p90: float
    n: int
    extra: dict = field(default_factory=dict)

    def csv_row(self, split: str) -> list[str]:
        return [split, str(self.n)] + [f"{v:.6f}" for v in (self.miou, self.oiou, self.p50, self.p70, self.p90)]


def iou_counts(pred, gt) -> tuple[int, int]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return int((pred & gt).sum()), int((pred | gt).sum())


def compute_metrics(preds, gts) -> MetricReport:
    if len(preds) != len(gts):
        raise ContractError(f"got {len(preds)} predictions for {len(gts)} ground truths")
    if not preds:
        raise ContractError("cannot compute metrics over zero samples")
    inter, union = zip(*(iou_counts(p, g) for p, g in zip(preds, gts)))
    ious = [1.0 if u == 0 else i / u for i, u in zip(inter, union)]
    tot_u = sum(union)
    oiou = 1.0 if tot_u == 0 else sum(inter) / tot_u
    arr = np.array(ious)
    p = [float((arr >= t).mean()) for t in THRESHOLDS]
    return MetricReport(ious, float(arr.mean()), float(oiou), *p, n=len(ious))


def metrics_csv(reports: dict[str, MetricReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for split, rep in reports.items():
        writer.writerow(rep.csv_row(split))
    return buf.getvalue()


def read_metrics_csv(text: str) -> dict[str, dict[str, float]]:
    rows = list(csv.DictReader(io.StringIO(text)))
    return {r["split"]: {k: float(v) for k, v in r.items() if k != "split"} for r in rows}
