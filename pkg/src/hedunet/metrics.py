"""Coastal-band evaluation: accuracy, mIoU, coastline deviation, edge F1 (ODS/OIS).

All metrics only look at pixels within a fixed radius of the true coastline.
Percentages are returned in [0, 100]. Missing quantities (no band, no
predicted coastline) are NaN and print as ``n/a``.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.ndimage import distance_transform_edt, maximum_filter

from .masks import derive_edges

NO_COASTLINE = math.nan
DEFAULT_THRESHOLDS = np.round(np.arange(1, 100) / 100.0, 2)


def distance_to(points: np.ndarray) -> np.ndarray:
    """Euclidean distance from every pixel to the nearest nonzero pixel of ``points``."""
    pts = np.asarray(points).astype(bool)
    if not pts.any():
        return np.full(pts.shape, np.inf)
    return distance_transform_edt(~pts)


def coastal_band(gt_edge: np.ndarray, radius_px: float) -> np.ndarray:
    """Pixels within ``radius_px`` (Euclidean) of a ground-truth edge pixel.

    An empty edge set gives an empty band; callers treat that as "n/a".
    """
    if radius_px < 0:
        raise ValueError("band radius must be non-negative")
    return distance_to(gt_edge) <= radius_px


def disk(radius: float) -> np.ndarray:
    r = int(math.floor(radius))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return yy * yy + xx * xx <= radius * radius


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

def confusion(pred_mask: np.ndarray, gt_mask: np.ndarray, band: np.ndarray) -> np.ndarray:
    """Counts [[gt sea & pred sea, gt sea & pred land], [gt land & pred sea, gt land & pred land]]."""
    if pred_mask.shape != gt_mask.shape or band.shape != gt_mask.shape:
        raise ValueError("pred, gt and band shapes differ")
    p = np.asarray(pred_mask).astype(bool)[band]
    g = np.asarray(gt_mask).astype(bool)[band]
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (g.astype(int), p.astype(int)), 1)
    return cm


def scores_from_confusion(cm: np.ndarray) -> tuple[float, float]:
    total = cm.sum()
    if total == 0:
        raise ValueError("empty coastal band")
    acc = (cm[0, 0] + cm[1, 1]) / total
    ious = []
    for c in (0, 1):
        inter = cm[c, c]
        union = cm[c, :].sum() + cm[:, c].sum() - inter
        # a class absent from both prediction and truth counts as perfect
        ious.append(1.0 if union == 0 else inter / union)
    return 100.0 * float(acc), 100.0 * float(np.mean(ious))


def seg_metrics(pred_mask: np.ndarray, gt_mask: np.ndarray, band: np.ndarray) -> tuple[float, float]:
    """Pixel accuracy and mean IoU (land, water) inside the band, in percent."""
    return scores_from_confusion(confusion(pred_mask, gt_mask, band))


# ---------------------------------------------------------------------------
# deviation
# ---------------------------------------------------------------------------

def deviation_sums(pred_edge: np.ndarray, gt_edge: np.ndarray, band: np.ndarray | None = None) -> tuple[float, int]:
    pe = np.asarray(pred_edge).astype(bool)
    if band is not None:
        pe = pe & band
    n = int(pe.sum())
    if n == 0:
        return 0.0, 0
    d = distance_to(gt_edge)[pe]
    return float(d.sum()), n


def avg_deviation(pred_edge: np.ndarray, gt_edge: np.ndarray, pixel_size_m: float = 1.0,
                  band: np.ndarray | None = None) -> float:
    """Mean distance from predicted coastline pixels to the nearest true coastline pixel.

    Not symmetric in its arguments. Returns ``NO_COASTLINE`` (NaN) when no
    coastline pixel was predicted.
    """
    if not np.asarray(gt_edge).any():
        raise ValueError("ground-truth coastline is empty")
    total, n = deviation_sums(pred_edge, gt_edge, band)
    if n == 0:
        return NO_COASTLINE
    return pixel_size_m * total / n


# ---------------------------------------------------------------------------
# edge F1
# ---------------------------------------------------------------------------

def edge_f1_curve(prob: np.ndarray, gt_edge: np.ndarray, band: np.ndarray,
                  match_radius_px: float = 2.0, thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> np.ndarray:
    """F1 for each threshold of one image (prediction is ``prob >= t``).

    A predicted pixel counts as correct when a ground-truth edge pixel lies
    within ``match_radius_px``; a ground-truth pixel is recovered when some
    predicted pixel lies within the same radius. No one-to-one assignment.
    Predictions outside the band are ignored.
    """
    th = np.asarray(thresholds, dtype=np.float64)
    if th.size == 0:
        raise ValueError("no thresholds given")
    gt = np.asarray(gt_edge).astype(bool) & band
    n_gt = int(gt.sum())
    if n_gt == 0:
        return np.full(th.shape, np.nan)
    p = np.asarray(prob, dtype=np.float64)
    pin = p[band]
    near_gt = (distance_to(gt) <= match_radius_px)[band]

    all_sorted = np.sort(pin)
    tp_sorted = np.sort(pin[near_gt])
    n_pred = pin.size - np.searchsorted(all_sorted, th, side="left")
    tp = tp_sorted.size - np.searchsorted(tp_sorted, th, side="left")

    masked = np.where(band, p, -1.0)
    best_near = maximum_filter(masked, footprint=disk(match_radius_px), mode="constant", cval=-1.0)[gt]
    rec_sorted = np.sort(best_near)
    matched = rec_sorted.size - np.searchsorted(rec_sorted, th, side="left")

    precision = np.divide(tp, n_pred, out=np.zeros(th.shape), where=n_pred > 0)
    recall = matched / n_gt
    denom = precision + recall
    return np.divide(2 * precision * recall, denom, out=np.zeros(th.shape), where=denom > 0)


def f1_ods_ois(probs: Sequence[np.ndarray], gt_edges: Sequence[np.ndarray], bands: Sequence[np.ndarray],
               match_radius_px: float = 2.0, thresholds: Sequence[float] = DEFAULT_THRESHOLDS):
    """Returns (ods, ois, mean_curve) in percent; images without coastline are skipped."""
    if len(thresholds) == 0:
        raise ValueError("no thresholds given")
    curves = [edge_f1_curve(p, g, b, match_radius_px, thresholds) for p, g, b in zip(probs, gt_edges, bands)]
    curves = [c for c in curves if not np.isnan(c).all()]
    if not curves:
        return math.nan, math.nan, np.full(len(thresholds), np.nan)
    c = np.stack(curves)
    mean_curve = c.mean(axis=0)
    return 100.0 * float(mean_curve.max()), 100.0 * float(c.max(axis=1).mean()), 100.0 * mean_curve


# ---------------------------------------------------------------------------
# dataset report
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    miou: float
    deviation_m: float
    deviation_px: float
    f1_ods: float
    f1_ois: float
    band_radius_m: float
    n_images: int

    FIELDS = ("accuracy", "miou", "deviation_m", "deviation_px", "f1_ods", "f1_ois", "band_radius_m", "n_images")

    def as_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        def fmt(v, nd=1):
            return "n/a" if isinstance(v, float) and math.isnan(v) else f"{v:.{nd}f}"

        head = ["Accuracy", "mIoU", "Deviation [m]", "Deviation [px]", "F1 ODS", "F1 OIS"]
        vals = [fmt(self.accuracy), fmt(self.miou), fmt(self.deviation_m, 0), fmt(self.deviation_px, 2),
                fmt(self.f1_ods), fmt(self.f1_ois)]
        widths = [max(len(h), len(v)) for h, v in zip(head, vals)]
        line1 = " | ".join(h.rjust(w) for h, w in zip(head, widths))
        line2 = "-+-".join("-" * w for w in widths)
        line3 = " | ".join(v.rjust(w) for v, w in zip(vals, widths))
        return f"{line1}\n{line2}\n{line3}"


def _fmt_csv(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 6))
    return str(v)


def write_report_csv(path, report: MetricsReport, extra: dict | None = None) -> None:
    row = dict(extra or {})
    row.update(report.as_dict())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow([_fmt_csv(v) for v in row.values()])


def write_f1_curve_csv(path, thresholds, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "mean_f1"])
        for t, f in zip(thresholds, curve):
            w.writerow([f"{t:.2f}", _fmt_csv(float(f))])


def evaluate(
    seg_probs: Sequence[np.ndarray] | None,
    edge_probs: Sequence[np.ndarray] | None,
    gt_masks: Sequence[np.ndarray],
    pixel_size_m: float = 40.0,
    band_radius_m: float = 2000.0,
    match_radius_px: float = 2.0,
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
    pred_edges: Sequence[np.ndarray] | None = None,
    return_curve: bool = False,
):
    """Pool metrics over a dataset of 2-D maps.

    Segmentation probabilities are thresholded at 0.5 and their coastline is
    ``derive_edges`` of the predicted mask; ``pred_edges`` overrides that for
    pure edge detectors. Confusion counts and deviation distances are pooled
    over all images; F1 uses the per-image mean.
    """
    radius_px = band_radius_m / pixel_size_m
    cm = np.zeros((2, 2), dtype=np.int64)
    dev_sum, dev_n = 0.0, 0
    bands, gts = [], []
    for i, gt_mask in enumerate(gt_masks):
        gt_edge = derive_edges(gt_mask)
        band = coastal_band(gt_edge, radius_px)
        bands.append(band)
        gts.append(gt_edge)
        if not band.any():
            continue
        coast = None
        if seg_probs is not None:
            pred_mask = np.asarray(seg_probs[i]) > 0.5
            cm += confusion(pred_mask, gt_mask, band)
            coast = derive_edges(pred_mask)
        if pred_edges is not None:
            coast = pred_edges[i]
        if coast is not None:
            s, n = deviation_sums(coast, gt_edge, band)
            dev_sum += s
            dev_n += n
    if seg_probs is not None and cm.sum() > 0:
        acc, miou = scores_from_confusion(cm)
    else:
        acc = miou = math.nan
    dev_px = dev_sum / dev_n if dev_n else NO_COASTLINE
    if edge_probs is not None:
        ods, ois, curve = f1_ods_ois(edge_probs, gts, bands, match_radius_px, thresholds)
    else:
        ods = ois = math.nan
        curve = np.full(len(thresholds), np.nan)
    report = MetricsReport(acc, miou, dev_px * pixel_size_m, dev_px, ods, ois, band_radius_m, len(gt_masks))
    return (report, curve) if return_curve else report
