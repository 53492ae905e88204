"""Overlap and boundary metrics for binary segmentation masks, and their text report."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, DimensionError

OVERLAP_KEYS = ("iou", "dice", "precision", "recall", "f1", "sensitivity", "specificity")
BOUNDARY_KEYS = ("hausdorff", "adb")
METRIC_KEYS = OVERLAP_KEYS + BOUNDARY_KEYS


class EmptyMaskError(DataError):
    """Boundary distances are undefined when either mask is empty."""


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    tn = pred.size - tp - fp - fn
    return tp, fp, fn, tn


def overlap_metrics(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    """Pixel-count overlap scores.

    A ratio whose denominator is zero is 1 when both masks are empty (nothing
    to find, nothing found) and 0 otherwise. Specificity follows the same rule
    for the background class.
    """
    tp, fp, fn, tn = confusion(pred, gt)
    both_empty = tp + fp + fn == 0
    fill = 1.0 if both_empty else 0.0
    dice = _ratio(2 * tp, 2 * tp + fp + fn, fill)
    recall = _ratio(tp, tp + fn, fill)
    return {
        "iou": _ratio(tp, tp + fp + fn, fill),
        "dice": dice,
        "precision": _ratio(tp, tp + fp, fill),
        "recall": recall,
        "f1": dice,
        "sensitivity": recall,
        "specificity": _ratio(tn, tn + fp, 1.0 if tn + fp + fn == 0 else 0.0),
    }


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """``[N, 2]`` coordinates of foreground pixels with a 4-neighbour in the background.

    Pixels beyond the image edge count as background.
    """
    m = np.pad(np.asarray(mask, dtype=bool), 1, constant_values=False)
    core = m[1:-1, 1:-1]
    interior = m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return np.argwhere(core & ~interior)


def _nearest_distances(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    _, idx = cKDTree(dst).query(src, k=1)
    diff = (src - dst[idx]).astype(np.float64)
    return np.sqrt((diff ** 2).sum(axis=1))


def boundary_metrics(pred: np.ndarray, gt: np.ndarray, spacing: float = 1.0) -> tuple[float, float]:
    """``(hausdorff, adb)`` between the two mask boundaries, in units of ``spacing``."""
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not pred.any() or not gt.any():
        raise EmptyMaskError("boundary metrics need two nonempty masks")
    bp, bg = boundary_pixels(pred), boundary_pixels(gt)
    d_pg = _nearest_distances(bp, bg)
    d_gp = _nearest_distances(bg, bp)
    hausdorff = max(d_pg.max(), d_gp.max())
    # correctly rounded sum, so the result does not depend on summation order
    adb = math.fsum(np.concatenate([d_pg, d_gp]).tolist()) / (d_pg.size + d_gp.size)
    return float(hausdorff * spacing), float(adb * spacing)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


@dataclass
class MetricsReport:
    """Per-image metric records plus their means.

    Boundary metrics are skipped for images where either mask is empty; those
    images are counted in ``boundary_excluded``. ``jaccard`` is the same
    number as ``iou``.
    """

    records: list[dict[str, float]] = field(default_factory=list)
    boundary_excluded: int = 0

    def add(self, pred: np.ndarray, gt: np.ndarray, spacing: float = 1.0) -> dict[str, float]:
        rec = overlap_metrics(pred, gt)
        try:
            rec["hausdorff"], rec["adb"] = boundary_metrics(pred, gt, spacing)
        except EmptyMaskError:
            rec["hausdorff"] = rec["adb"] = math.nan
            self.boundary_excluded += 1
        self.records.append(rec)
        return rec

    def mean(self, key: str) -> float:
        vals = [r[key] for r in self.records if not math.isnan(r[key])]
        return float(np.mean(vals)) if vals else math.nan

    @property
    def means(self) -> dict[str, float]:
        return {k: self.mean(k) for k in METRIC_KEYS}

    def to_text(self) -> str:
        lines = []
        for i, rec in enumerate(self.records):
            lines.append(f"image={i} " + " ".join(f"{k}={_fmt(rec[k])}" for k in METRIC_KEYS))
        means = self.means
        lines.append(f"aggregate n={len(self.records)} boundary_excluded={self.boundary_excluded} "
                     + " ".join(f"{k}={_fmt(means[k])}" for k in METRIC_KEYS))
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("image",) + METRIC_KEYS)
        for i, rec in enumerate(self.records):
            w.writerow([i] + [_fmt(rec[k]) for k in METRIC_KEYS])
        w.writerow(["mean"] + [_fmt(v) for v in self.means.values()])
        return buf.getvalue()


def evaluate_masks(preds, gts, spacing: float = 1.0) -> MetricsReport:
    report = MetricsReport()
    for p, g in zip(preds, gts, strict=True):
        report.add(p, g, spacing)
    return report
