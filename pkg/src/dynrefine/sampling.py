"""Bilinear sampling of continuous fields (flow, depth) at sub-pixel points."""

from __future__ import annotations

import numpy as np


def bilinear_weights(shape: tuple[int, int], points: np.ndarray):
    """Corner indices and blend weights for bilinear sampling.

    Points are (N, 2) as (x, y) in pixel-center coordinates and are clamped to
    the valid domain [0, W-1] x [0, H-1]. Returns flat corner indices (N, 4)
    into an (H*W,) array and matching weights (N, 4) that sum to 1.
    """
    h, w = shape
    x = np.clip(points[:, 0], 0.0, w - 1.0)
    y = np.clip(points[:, 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(y).astype(int), 0, h - 2)
    fx = x - x0
    fy = y - y0
    base = y0 * w + x0
    idx = np.stack([base, base + 1, base + w, base + w + 1], axis=1)
    weights = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
    )
    return idx, weights


def bilinear_sample(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample an (H, W) or (H, W, C) field at (N, 2) points, edge-clamped."""
    field = np.asarray(field, dtype=float)
    points = np.asarray(points, dtype=float)
    h, w = field.shape[:2]
    idx, weights = bilinear_weights((h, w), points)
    flat = field.reshape(h * w, -1)
    values = np.einsum("nk,nkc->nc", weights, flat[idx])
    if field.ndim == 2:
        return values[:, 0]
    return values
