"""Dynamic-mask operations: merging instances, sampling, and motion scores.

Masks are binary rasters where 1 marks a dynamic (moving-object) pixel. All
sampling is nearest-neighbor so values stay in {0, 1}.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, EmptyTrack, ParseError, ValidationError
from .sceneio import read_raster, write_raster
from .validation import check_mask

# Mask-derived per-track motion scores (dynamic if any track point is masked).
MU_DYNAMIC = 25.0
MU_STATIC = 15.0


@dataclass
class InstanceMaskSequence:
    """Binary masks of one tracked instance over all frames, shape (T, H, W)."""

    instance_id: int
    masks: np.ndarray

    def __post_init__(self):
        self.masks = check_mask(self.masks, f"instance {self.instance_id}")
        if self.masks.ndim != 3:
            raise ValidationError(f"instance masks must be (T, H, W), got {self.masks.shape}")


@dataclass
class DynamicMaskSequence:
    """Unified binary dynamic mask over all frames, shape (T, H, W)."""

    masks: np.ndarray

    def __post_init__(self):
        self.masks = check_mask(self.masks, "dynamic mask")
        if self.masks.ndim != 3:
            raise ValidationError(f"dynamic masks must be (T, H, W), got {self.masks.shape}")

    @classmethod
    def zeros(cls, frame_count: int, height: int, width: int) -> "DynamicMaskSequence":
        return cls(np.zeros((frame_count, height, width), dtype=np.uint8))

    @property
    def frame_count(self) -> int:
        return self.masks.shape[0]


def merge_masks(
    instances: list[InstanceMaskSequence],
    shape: tuple[int, int, int] | None = None,
) -> DynamicMaskSequence:
    """Element-wise union of all instance masks.

    ``shape`` (T, H, W) is required when ``instances`` is empty; otherwise it
    must agree with the instances. Output order does not depend on instance
    order (union is commutative and associative).
    """
    if not instances:
        if shape is None:
            raise ValueError("shape is required to merge an empty instance list")
        return DynamicMaskSequence.zeros(*shape)
    base = instances[0].masks.shape
    if shape is not None and tuple(shape) != base:
        raise DimensionMismatch(f"requested shape {shape} != instance shape {base}")
    union = np.zeros(base, dtype=np.uint8)
    for inst in instances:
        if inst.masks.shape != base:
            raise DimensionMismatch(
                f"instance {inst.instance_id} has shape {inst.masks.shape}, expected {base}"
            )
        np.logical_or(union, inst.masks, out=union.view(bool))
    return DynamicMaskSequence(union)


def sample_mask(masks: DynamicMaskSequence, t: int, p) -> int:
    """Mask value at the pixel nearest to ``p`` in frame ``t`` (clamped)."""
    return int(sample_mask_many(masks, t, np.asarray(p, dtype=float)[None, :])[0])


def sample_mask_many(masks: DynamicMaskSequence, t: int, points: np.ndarray) -> np.ndarray:
    """Nearest-neighbor mask values for (N, 2) pixel positions, clamped to bounds."""
    grid = masks.masks[t]
    h, w = grid.shape
    points = np.asarray(points, dtype=float)
    cols = np.clip(np.rint(points[:, 0]).astype(int), 0, w - 1)
    rows = np.clip(np.rint(points[:, 1]).astype(int), 0, h - 1)
    return grid[rows, cols]


def resample_nearest(masks: DynamicMaskSequence, new_size: tuple[int, int]) -> DynamicMaskSequence:
    """Resample to (height, width) ``new_size`` by nearest neighbor.

    Keeps values binary, unlike any interpolating resampler.
    """
    t, h, w = masks.masks.shape
    new_h, new_w = new_size
    if (new_h, new_w) == (h, w):
        return DynamicMaskSequence(masks.masks.copy())
    rows = np.clip(np.rint((np.arange(new_h) + 0.5) * h / new_h - 0.5).astype(int), 0, h - 1)
    cols = np.clip(np.rint((np.arange(new_w) + 0.5) * w / new_w - 0.5).astype(int), 0, w - 1)
    return DynamicMaskSequence(masks.masks[:, rows[:, None], cols[None, :]])


def track_motion_score(track_points, masks: DynamicMaskSequence) -> float:
    """Binary motion score of a track: MU_DYNAMIC if any point lands on a
    masked pixel, MU_STATIC otherwise.

    ``track_points`` is a sequence of (frame, pixel) pairs.
    """
    track_points = list(track_points)
    if not track_points:
        raise EmptyTrack("motion score of an empty track")
    for t, p in track_points:
        if sample_mask(masks, int(t), p):
            return MU_DYNAMIC
    return MU_STATIC


def read_instance_masks(directory, frame_count: int | None = None) -> list[InstanceMaskSequence]:
    """Load per-instance mask sequences from ``instance_*/`` subdirectories.

    Each subdirectory holds one ``mask_%04d.ras`` uint8 raster per frame.
    """
    directory = Path(directory)
    subdirs = sorted(p for p in directory.iterdir() if p.is_dir() and p.name.startswith("instance_"))
    if not subdirs:
        raise ParseError(directory, 0, "no instance_* subdirectories found")
    instances = []
    for sub in subdirs:
        names = sorted(p.name for p in sub.glob("mask_*.ras"))
        if frame_count is not None and len(names) != frame_count:
            raise DimensionMismatch(
                f"{sub.name}: found {len(names)} masks, expected {frame_count}"
            )
        rasters = [read_raster(sub / n) for n in names]
        instances.append(InstanceMaskSequence(int(sub.name.split("_")[1]), np.stack(rasters)))
    return instances


def load_dynamic_masks(directory, frame_count: int | None = None) -> DynamicMaskSequence:
    """Load a dynamic mask sequence from a directory.

    Accepts either ``instance_*/`` subdirectories (merged by union) or flat
    ``mask_%04d.ras`` rasters that already hold the unified mask.
    """
    directory = Path(directory)
    flat = sorted(p.name for p in directory.glob("mask_*.ras"))
    if flat:
        masks = np.stack([read_raster(directory / n) for n in flat])
        if frame_count is not None and masks.shape[0] != frame_count:
            raise DimensionMismatch(f"found {masks.shape[0]} masks, expected {frame_count}")
        return DynamicMaskSequence(masks)
    shape = None
    instances = read_instance_masks(directory, frame_count)
    return merge_masks(instances, shape)


def write_instance_masks(directory, instances: list[InstanceMaskSequence]) -> None:
    directory = Path(directory)
    for inst in instances:
        sub = directory / f"instance_{inst.instance_id:02d}"
        sub.mkdir(parents=True, exist_ok=True)
        for t in range(inst.masks.shape[0]):
            write_raster(sub / f"mask_{t:04d}.ras", inst.masks[t])
