"""Input validation helpers shared by the estimators and file readers."""

from __future__ import annotations

import numpy as np

from .errors import DimensionMismatch, ValidationError


def check_depth(depth: np.ndarray, name: str = "depth") -> np.ndarray:
    """Validate an H x W depth map: finite and strictly positive."""
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise ValidationError(f"{name} must be 2-D, got shape {depth.shape}")
    if not np.all(np.isfinite(depth)):
        raise ValidationError(f"{name} contains non-finite values")
    if np.any(depth <= 0.0):
        raise ValidationError(f"{name} contains non-positive values")
    return depth


def check_flow(flow: np.ndarray, name: str = "flow") -> np.ndarray:
    """Validate an H x W x 2 flow field: finite."""
    flow = np.asarray(flow, dtype=float)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValidationError(f"{name} must be H x W x 2, got shape {flow.shape}")
    if not np.all(np.isfinite(flow)):
        raise ValidationError(f"{name} contains non-finite values")
    return flow


def check_mask(mask: np.ndarray, name: str = "mask") -> np.ndarray:
    """Validate a binary mask (any leading shape): values in {0, 1}."""
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValidationError(f"{name} must be binary (0/1)")
    return mask.astype(np.uint8)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"{what}: shapes {a.shape} and {b.shape} differ")


def check_points(points: np.ndarray, name: str = "points") -> np.ndarray:
    """Coerce to an (N, 2) float array of pixel positions."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[None, :]
    if points.ndim != 2 or points.shape[1] != 2:
        raise ValidationError(f"{name} must be (N, 2), got shape {points.shape}")
    return points
