"""Trajectory, depth, and mask evaluation metrics.

Trajectories are Umeyama-aligned before evaluation so the scores are
invariant to global similarity transforms of the estimate; depth is aligned
by a median scale by default. Relative pose errors use a one-frame step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DimensionMismatch, EmptyValidSet
from .geometry import PoseSE3, rotation_angle, umeyama_align


@dataclass(frozen=True)
class TrajectoryMetrics:
    ate: float  # scene units
    rte: float  # scene units
    rre: float  # degrees


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    log_rmse: float
    delta_125: float  # percentage in [0, 100]


@dataclass(frozen=True)
class MaskMetrics:
    j: float  # region similarity (Jaccard)
    f: float  # contour similarity (boundary F-measure)


def trajectory_metrics(estimated: list[PoseSE3], reference: list[PoseSE3]) -> TrajectoryMetrics:
    """ATE / RTE / RRE after similarity alignment of the camera centers.

    ATE is the RMS distance between aligned and reference centers; RTE and
    RRE are the RMS translation magnitude and rotation angle (degrees) of the
    frame-to-frame relative-pose errors after alignment.
    """
    if len(estimated) != len(reference):
        raise DimensionMismatch(
            f"trajectory lengths differ: {len(estimated)} vs {len(reference)}"
        )
    est_centers = np.stack([p.translation for p in estimated])
    ref_centers = np.stack([p.translation for p in reference])
    sim = umeyama_align(est_centers, ref_centers)
    aligned_centers = sim.apply(est_centers)
    ate = math.sqrt(float(np.mean(np.sum((aligned_centers - ref_centers) ** 2, axis=1))))

    aligned = [
        PoseSE3(sim.rotation @ p.rotation, aligned_centers[t])
        for t, p in enumerate(estimated)
    ]
    trans_sq = []
    angles_sq = []
    for t in range(len(aligned) - 1):
        rel_est = aligned[t].invert().compose(aligned[t + 1])
        rel_ref = reference[t].invert().compose(reference[t + 1])
        err = rel_ref.invert().compose(rel_est)
        trans_sq.append(float(err.translation @ err.translation))
        angles_sq.append(rotation_angle(err.rotation) ** 2)
    rte = math.sqrt(float(np.mean(trans_sq))) if trans_sq else 0.0
    rre = math.degrees(math.sqrt(float(np.mean(angles_sq)))) if angles_sq else 0.0
    return TrajectoryMetrics(ate, rte, rre)


def depth_metrics(
    predicted: np.ndarray,
    ground_truth: np.ndarray,
    valid_mask: np.ndarray | None = None,
    align: str = "median",
) -> DepthMetrics:
    """abs-rel, log-rmse, and delta<1.25 accuracy over valid pixels.

    With ``align='median'`` the prediction is scaled by the median of
    gt/pred before scoring, absorbing any global scale; ``'none'`` disables
    this.
    """
    predicted = np.asarray(predicted, dtype=float)
    ground_truth = np.asarray(ground_truth, dtype=float)
    if predicted.shape != ground_truth.shape:
        raise DimensionMismatch(
            f"depth shapes differ: {predicted.shape} vs {ground_truth.shape}"
        )
    valid = np.isfinite(ground_truth) & (ground_truth > 0.0) & (predicted > 0.0)
    if valid_mask is not None:
        valid &= np.asarray(valid_mask).astype(bool)
    if not valid.any():
        raise EmptyValidSet("no valid pixels for depth evaluation")
    pred = predicted[valid]
    gt = ground_truth[valid]
    if align == "median":
        pred = pred * float(np.median(gt / pred))
    elif align != "none":
        raise ValueError(f"unknown alignment {align!r}")
    abs_rel = float(np.mean(np.abs(pred - gt) / gt))
    log_rmse = math.sqrt(float(np.mean((np.log(pred) - np.log(gt)) ** 2)))
    ratio = np.maximum(pred / gt, gt / pred)
    delta = 100.0 * float(np.mean(ratio < 1.25))
    return DepthMetrics(abs_rel, log_rmse, delta)


def _boundary(mask: np.ndarray) -> np.ndarray:
    if not mask.any():
        return np.zeros_like(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, border_value=0)
    return mask & ~eroded


def _frame_mask_metrics(pred: np.ndarray, gt: np.ndarray, tolerance: float) -> tuple[float, float]:
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    union = np.count_nonzero(pred | gt)
    j = 1.0 if union == 0 else np.count_nonzero(pred & gt) / union

    pred_b = _boundary(pred)
    gt_b = _boundary(gt)
    if not pred_b.any() and not gt_b.any():
        return j, 1.0
    if not pred_b.any() or not gt_b.any():
        return j, 0.0
    dist_to_gt = ndimage.distance_transform_edt(~gt_b)
    dist_to_pred = ndimage.distance_transform_edt(~pred_b)
    precision = float(np.mean(dist_to_gt[pred_b] <= tolerance))
    recall = float(np.mean(dist_to_pred[gt_b] <= tolerance))
    if precision + recall == 0.0:
        return j, 0.0
    return j, 2.0 * precision * recall / (precision + recall)


def mask_metrics(
    predicted: np.ndarray,
    ground_truth: np.ndarray,
    boundary_tolerance: float | None = None,
) -> MaskMetrics:
    """Frame-averaged region similarity J and boundary F-measure.

    ``boundary_tolerance`` defaults to 0.8% of the image diagonal, at least
    one pixel; boundary pixels match if a counterpart lies within that radius.
    """
    predicted = np.asarray(predicted)
    ground_truth = np.asarray(ground_truth)
    if predicted.shape != ground_truth.shape:
        raise DimensionMismatch(
            f"mask shapes differ: {predicted.shape} vs {ground_truth.shape}"
        )
    if predicted.ndim == 2:
        predicted = predicted[None]
        ground_truth = ground_truth[None]
    h, w = predicted.shape[1:]
    if boundary_tolerance is None:
        boundary_tolerance = max(1.0, math.ceil(0.008 * math.hypot(h, w)))
    js, fs = [], []
    for t in range(predicted.shape[0]):
        j, f = _frame_mask_metrics(predicted[t], ground_truth[t], boundary_tolerance)
        js.append(j)
        fs.append(f)
    return MaskMetrics(float(np.mean(js)), float(np.mean(fs)))
