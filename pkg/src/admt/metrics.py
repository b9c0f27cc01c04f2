"""Segmentation quality metrics: Dice, Jaccard, HD95 and ASD.

Overlap scores are percentages. Surface distances are computed between
boundary pixels (foreground pixels 4-adjacent to background, with the
image border counting as background) using an exact Euclidean distance
transform; the symmetric distance set is the union of both directed
sets. HD95 takes the 95th percentile with linear interpolation between
order statistics, ASD the mean. If exactly one mask is empty the
distances are undefined and reported as NaN sentinels, excluded from
aggregation.
"""

from __future__ import annotations

import dataclasses

import numpy as np
from scipy import ndimage


def dice_jaccard(pred, gt):
    """Overlap scores in percent; both-empty counts as perfect agreement."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p = int(pred.sum())
    g = int(gt.sum())
    if p == 0 and g == 0:
        return 100.0, 100.0
    inter = int(np.logical_and(pred, gt).sum())
    dice = 100.0 * 2.0 * inter / (p + g)
    jaccard = 100.0 * inter / (p + g - inter)
    return dice, jaccard


def boundary_pixels(mask):
    """Foreground pixels with a 4-neighbour in background or on the border."""
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return mask & ~interior


def surface_distances(pred, gt):
    """(hd95, asd) in pixels, or (nan, nan) when only one mask is empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    p_empty = not pred.any()
    g_empty = not gt.any()
    if p_empty and g_empty:
        return 0.0, 0.0
    if p_empty or g_empty:
        return float("nan"), float("nan")
    bp = boundary_pixels(pred)
    bg = boundary_pixels(gt)
    # EDT of the complement gives each pixel's exact distance to the boundary set
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    distances = np.concatenate([dist_to_gt[bp], dist_to_pred[bg]])
    return float(np.percentile(distances, 95)), float(distances.mean())


@dataclasses.dataclass
class SampleMetrics:
    sample_id: str
    cls: int
    dice: float
    jaccard: float
    hd95: float  # NaN when undefined
    asd: float


@dataclasses.dataclass
class MetricReport:
    """Per-class means over a sample set, plus the foreground-mean summary."""

    per_sample: list
    per_class: dict  # cls -> dict(dice, jaccard, hd95, asd, excluded)
    mean_dice: float
    mean_jaccard: float
    mean_hd95: float
    mean_asd: float


def evaluate_sample(sample_id, pred, gt, num_classes):
    """Metrics for every foreground class of one sample."""
    rows = []
    for cls in range(1, num_classes):
        dice, jacc = dice_jaccard(pred == cls, gt == cls)
        hd95, asd = surface_distances(pred == cls, gt == cls)
        rows.append(SampleMetrics(sample_id, cls, dice, jacc, hd95, asd))
    return rows


def aggregate(per_sample, num_classes):
    """Class-wise means; undefined distances are excluded and counted."""
    per_class = {}
    for cls in range(1, num_classes):
        rows = [r for r in per_sample if r.cls == cls]
        dists = [(r.hd95, r.asd) for r in rows if not np.isnan(r.hd95)]
        per_class[cls] = {
            "dice": float(np.mean([r.dice for r in rows])) if rows else float("nan"),
            "jaccard": float(np.mean([r.jaccard for r in rows])) if rows else float("nan"),
            "hd95": float(np.mean([d[0] for d in dists])) if dists else float("nan"),
            "asd": float(np.mean([d[1] for d in dists])) if dists else float("nan"),
            "excluded": len(rows) - len(dists),
        }
    classes = sorted(per_class)

    def defined_mean(key):
        vals = [per_class[c][key] for c in classes if not np.isnan(per_class[c][key])]
        return float(np.mean(vals)) if vals else float("nan")

    return MetricReport(
        per_sample=list(per_sample),
        per_class=per_class,
        mean_dice=defined_mean("dice"),
        mean_jaccard=defined_mean("jaccard"),
        mean_hd95=defined_mean("hd95"),
        mean_asd=defined_mean("asd"),
    )


def metrics_csv_lines(report):
    """CSV rows: sample_id, class, dice, jaccard, hd95, asd ("NA" if undefined)."""

    def fmt(v):
        return "NA" if np.isnan(v) else f"{v:.12g}"

    lines = ["sample_id,class,dice,jaccard,hd95,asd"]
    for r in report.per_sample:
        lines.append(
            f"{r.sample_id},{r.cls},{fmt(r.dice)},{fmt(r.jaccard)},{fmt(r.hd95)},{fmt(r.asd)}"
        )
    for cls in sorted(report.per_class):
        s = report.per_class[cls]
        lines.append(
            f"aggregate,{cls},{fmt(s['dice'])},{fmt(s['jaccard'])},{fmt(s['hd95'])},{fmt(s['asd'])}"
        )
    lines.append(
        f"aggregate,mean,{fmt(report.mean_dice)},{fmt(report.mean_jaccard)},"
        f"{fmt(report.mean_hd95)},{fmt(report.mean_asd)}"
    )
    return lines
