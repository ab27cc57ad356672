"""Binary change-detection metrics, confusion rendering and CSV reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

METRIC_COLUMNS = ("OA", "IoU", "F1", "Rec", "Prec")

# category -> RGB: TP white, TN black, FP green, FN red
COLORS = {
    "tp": (255, 255, 255),
    "tn": (0, 0, 0),
    "fp": (0, 255, 0),
    "fn": (255, 0, 0),
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError(f"confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricSet:
    iou: float
    prec: float
    rec: float
    f1: float
    oa: float
    undefined: frozenset[str] = field(default_factory=frozenset)

    def as_percent_row(self) -> dict[str, str]:
        values = {"OA": self.oa, "IoU": self.iou, "F1": self.f1, "Rec": self.rec, "Prec": self.prec}
        return {k: f"{100 * v:.2f}" for k, v in values.items()}


def _check_masks(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match ground truth {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ValueError(f"{name} mask must be binary (0/1)")
    return pred.astype(bool), gt.astype(bool)


def confusion(pred: np.ndarray, gt: np.ndarray) -> ConfusionCounts:
    """Per-pixel tallies with change (1) as the positive class."""
    p, g = _check_masks(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp=tp, tn=p.size - tp - fp - fn, fp=fp, fn=fn)


def metrics(c: ConfusionCounts) -> MetricSet:
    """IoU, precision, recall, F1 and overall accuracy from counts.

    A ratio with a zero denominator is reported as 0 and its name is added to
    ``undefined``.
    """
    if c.total == 0:
        raise ValueError("cannot compute metrics from all-zero counts")
    undefined = set()

    def ratio(name, num, den):
        if den == 0:
            undefined.add(name)
            return 0.0
        return num / den

    iou = ratio("iou", c.tp, c.tp + c.fn + c.fp)
    prec = ratio("prec", c.tp, c.tp + c.fp)
    rec = ratio("rec", c.tp, c.tp + c.fn)
    f1 = ratio("f1", 2 * prec * rec, prec + rec)
    oa = (c.tp + c.tn) / c.total
    return MetricSet(iou=iou, prec=prec, rec=rec, f1=f1, oa=oa, undefined=frozenset(undefined))


class ConfusionAccumulator:
    """Micro-averaging: sum counts over every image, compute metrics once."""

    def __init__(self):
        self.counts = ConfusionCounts()
        self.per_image: dict[str, ConfusionCounts] = {}

    def update(self, pred, gt, key: str | None = None) -> ConfusionCounts:
        c = confusion(pred, gt)
        self.counts = self.counts + c
        if key is not None:
            self.per_image[key] = c
        return c

    def result(self) -> MetricSet:
        return metrics(self.counts)


def render_confusion(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 image coloured by confusion category."""
    p, g = _check_masks(pred, gt)
    img = np.zeros(p.shape + (3,), dtype=np.uint8)
    img[p & g] = COLORS["tp"]
    img[p & ~g] = COLORS["fp"]
    img[~p & g] = COLORS["fn"]
    return img


def decode_confusion(img: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`render_confusion`: recover (pred, gt)."""
    img = np.asarray(img)
    pred = np.zeros(img.shape[:2], dtype=np.uint8)
    gt = np.zeros(img.shape[:2], dtype=np.uint8)
    matched = np.zeros(img.shape[:2], dtype=bool)
    for cat, (p, g) in {"tp": (1, 1), "tn": (0, 0), "fp": (1, 0), "fn": (0, 1)}.items():
        hit = (img == COLORS[cat]).all(axis=-1)
        pred[hit], gt[hit] = p, g
        matched |= hit
    if not matched.all():
        raise ValueError("image contains colours outside the confusion palette")
    return pred, gt


def save_png(path: str | Path, array: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def write_metrics_csv(path: str | Path, rows: Iterable[tuple[str, MetricSet]]) -> None:
    """One row per run/config; metric columns in percent with 2 decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("run",) + METRIC_COLUMNS)
        for name, m in rows:
            r = m.as_percent_row()
            writer.writerow((name,) + tuple(r[c] for c in METRIC_COLUMNS))


def write_radar_csv(path: str | Path, rows: Iterable[tuple[str, MetricSet]]) -> None:
    """Long-format (metric, model, value) table for external radar plots."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("metric", "model", "value"))
        for name, m in rows:
            for col, val in m.as_percent_row().items():
                writer.writerow((col, name, val))
