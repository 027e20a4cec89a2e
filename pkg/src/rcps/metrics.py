"""Overlap and surface-distance metrics (DSC, HD95, ASD) and their aggregation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

UNDEFINED = float("nan")
_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def _check(pred, gt):
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return pred, gt


def dsc(pred, gt, c: int = 1) -> float:
    """Dice coefficient of class ``c``; 1.0 if absent from both, 0.0 if absent from one."""
    pred, gt = _check(pred, gt)
    p, g = pred == c, gt == c
    sp, sg = int(p.sum()), int(g.sum())
    if sp == 0 and sg == 0:
        return 1.0
    if sp == 0 or sg == 0:
        return 0.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (sp + sg)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` removed by one 6-connected erosion (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, structure=_SIX_CONNECTED, border_value=0)


def pooled_surface_distances(pred_mask, gt_mask, spacing: Optional[Sequence[float]] = None) -> np.ndarray:
    """Both directed nearest-boundary distance sets, concatenated."""
    scale = np.ones(3) if spacing is None else np.asarray(spacing, dtype=np.float64)
    bp = np.argwhere(boundary(pred_mask)) * scale
    bg = np.argwhere(boundary(gt_mask)) * scale
    d_pg, _ = cKDTree(bg).query(bp)
    d_gp, _ = cKDTree(bp).query(bg)
    return np.concatenate([d_pg, d_gp])


def surface_distances(pred, gt, c: int = 1, spacing: Optional[Sequence[float]] = None):
    """``(hd95, asd)`` for class ``c``; ``(nan, nan)`` when either mask is empty.

    HD95 is the linearly interpolated 95th percentile of the pooled
    symmetric boundary distances and ASD their mean. Units are voxels unless
    ``spacing`` is given.
    """
    pred, gt = _check(pred, gt)
    p, g = pred == c, gt == c
    if not p.any() or not g.any():
        return UNDEFINED, UNDEFINED
    d = pooled_surface_distances(p, g, spacing)
    return float(np.percentile(d, 95, method="linear")), float(d.mean())


@dataclass
class MetricResult:
    case: str
    cls: int
    dsc: float
    hd95: float
    asd: float

    @property
    def defined(self) -> bool:
        return not (math.isnan(self.hd95) or math.isnan(self.asd))


def case_metrics(case: str, pred, gt, num_classes: int, spacing=None) -> list:
    """One MetricResult per foreground class."""
    rows = []
    for c in range(1, num_classes):
        hd, asd = surface_distances(pred, gt, c, spacing)
        rows.append(MetricResult(case, c, dsc(pred, gt, c), hd, asd))
    return rows


@dataclass
class Summary:
    cls: object  # class index or "all"
    n: int
    dsc_mean: float
    dsc_std: float
    hd95_mean: float
    hd95_std: float
    asd_mean: float
    asd_std: float
    undefined: int = 0


def _mean_std(values):
    vals = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if vals.size == 0:
        return UNDEFINED, UNDEFINED
    return float(vals.mean()), float(vals.std())


def summarize(rows: Sequence[MetricResult]) -> list:
    """Mean and population std per class and over all rows.

    Undefined distance entries are left out of the distance statistics and
    counted in ``undefined``.
    """
    out = []
    groups = sorted({r.cls for r in rows})
    for key in groups + ["all"]:
        sel = [r for r in rows if key == "all" or r.cls == key]
        d = _mean_std([r.dsc for r in sel])
        h = _mean_std([r.hd95 for r in sel])
        a = _mean_std([r.asd for r in sel])
        out.append(Summary(key, len(sel), *d, *h, *a, sum(not r.defined for r in sel)))
    return out


CSV_COLUMNS = ("case", "class", "dsc", "hd95", "asd")


def _fmt(v):
    return "nan" if isinstance(v, float) and math.isnan(v) else (f"{v:.6f}" if isinstance(v, float) else str(v))


def write_metrics_csv(rows: Sequence[MetricResult], path, summary: Optional[list] = None) -> Path:
    """Per-case rows, then one ``mean`` and one ``std`` row per summary group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = summarize(rows) if summary is None else summary
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r.case, r.cls, _fmt(r.dsc), _fmt(r.hd95), _fmt(r.asd)])
        for s in summary:
            w.writerow(["mean", s.cls, _fmt(s.dsc_mean), _fmt(s.hd95_mean), _fmt(s.asd_mean)])
            w.writerow(["std", s.cls, _fmt(s.dsc_std), _fmt(s.hd95_std), _fmt(s.asd_std)])
    return path
