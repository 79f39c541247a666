"""Segmentation quality metrics: per-class Dice and symmetric Hausdorff distance.

Hausdorff distances are exact maxima over class-voxel-center point sets,
measured in physical millimeters.  Distances are computed in spacing units
normalized by the smallest spacing component and scaled back at the end, so
scaling all spacing components by a common factor scales the result by exactly
that factor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMaskError, InvalidParameterError
from .volume import CLASS_NAMES, FOREGROUND_CLASSES, LabelMap

_CHUNK = 4096  # pred points per block when forming pairwise distance tiles


def _check_grids(pred: LabelMap, gt: LabelMap) -> None:
    if pred.dims != gt.dims:
        raise InvalidParameterError(f"dims mismatch: {pred.dims} vs {gt.dims}")
    if pred.spacing != gt.spacing:
        raise InvalidParameterError(f"spacing mismatch: {pred.spacing} vs {gt.spacing}")


def dice(pred: LabelMap, gt: LabelMap, label: int) -> float:
    """Dice overlap 2|P∩G|/(|P|+|G|) for one class.

    Both masks empty -> 1.0; exactly one empty -> 0.0.
    """
    _check_grids(pred, gt)
    p = pred.data == label
    g = gt.data == label
    np_, ng = int(p.sum()), int(g.sum())
    if np_ + ng == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / (np_ + ng)


def _directed_sq_max(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """max over a of min over b of squared distance, chunked to bound memory."""
    worst = 0.0
    for start in range(0, len(points_a), _CHUNK):
        block = points_a[start : start + _CHUNK]
        d2 = ((block[:, None, :] - points_b[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(pred: LabelMap, gt: LabelMap, label: int) -> float:
    """Symmetric Hausdorff distance between class-voxel centers, in mm."""
    _check_grids(pred, gt)
    p_idx = np.argwhere(pred.data == label)
    g_idx = np.argwhere(gt.data == label)
    if len(p_idx) == 0 or len(g_idx) == 0:
        raise EmptyMaskError(f"class {label} empty in {'pred' if len(p_idx) == 0 else 'gt'}")
    base = min(pred.spacing)
    ratio = np.asarray(pred.spacing, dtype=np.float64) / base
    p_pts = p_idx.astype(np.float64) * ratio
    g_pts = g_idx.astype(np.float64) * ratio
    worst_sq = max(_directed_sq_max(p_pts, g_pts), _directed_sq_max(g_pts, p_pts))
    return base * float(np.sqrt(worst_sq))


@dataclass(frozen=True)
class ClassReport:
    dice: float
    hausdorff_mm: float | None  # None when either mask is empty
    pred_voxels: int
    gt_voxels: int


@dataclass(frozen=True)
class CaseReport:
    """Per-class metrics for one prediction/ground-truth pair."""

    entries: dict[str, ClassReport]

    def class_names(self) -> tuple[str, ...]:
        return tuple(self.entries.keys())


def evaluate_case(pred: LabelMap, gt: LabelMap) -> CaseReport:
    """Dice and Hausdorff for each foreground class (LV, MYO, RV)."""
    _check_grids(pred, gt)
    entries: dict[str, ClassReport] = {}
    for label in FOREGROUND_CLASSES:
        n_pred = int((pred.data == label).sum())
        n_gt = int((gt.data == label).sum())
        d = dice(pred, gt, label)
        hd = None if n_pred == 0 or n_gt == 0 else hausdorff(pred, gt, label)
        entries[CLASS_NAMES[label]] = ClassReport(d, hd, n_pred, n_gt)
    return CaseReport(entries)
