"""Trajectory, depth, and mask metrics."""

import numpy as np
import pytest

from dynrefine.errors import EmptyValidSet
from dynrefine.geometry import PoseSE3, SimilarityTransform, umeyama_align
from dynrefine.metrics import depth_metrics, mask_metrics, trajectory_metrics


def _arc_trajectory(n=10, omega=0.1, radius=2.0):
    poses = []
    for t in range(n):
        angle = omega * t
        c, s = np.cos(angle), np.sin(angle)
        rotation = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
        poses.append(PoseSE3(rotation, radius * np.array([c - 1.0, 0.0, s])))
    return poses


def test_identical_trajectories_zero():
    poses = _arc_trajectory()
    result = trajectory_metrics(poses, poses)
    assert result.ate < 1e-9
    assert result.rte < 1e-9
    assert result.rre < 1e-9


def test_similarity_transformed_trajectory_zero():
    rng = np.random.default_rng(0)
    poses = _arc_trajectory(12)
    rotation = PoseSE3.exp(np.concatenate([rng.normal(size=3), np.zeros(3)])).rotation
    sim = SimilarityTransform(1.7, rotation, rng.normal(size=3))
    transformed = [
        PoseSE3(rotation @ p.rotation, sim.apply(p.translation[None, :])[0]) for p in poses
    ]
    result = trajectory_metrics(transformed, poses)
    assert result.ate < 1e-8
    assert result.rte < 1e-8
    assert result.rre < 1e-8


def test_single_corrupted_pose_matches_direct_computation():
    poses = _arc_trajectory(10)
    corrupted = [p.copy() for p in poses]
    corrupted[4] = PoseSE3(corrupted[4].rotation, corrupted[4].translation + [0.05, -0.02, 0.01])
    result = trajectory_metrics(corrupted, poses)

    est = np.stack([p.translation for p in corrupted])
    ref = np.stack([p.translation for p in poses])
    sim = umeyama_align(est, ref)
    residuals = sim.apply(est) - ref
    expected_ate = float(np.sqrt((residuals**2).sum(axis=1).mean()))
    assert result.ate == pytest.approx(expected_ate, rel=1e-12)


def test_trajectory_scale_invariance():
    poses = _arc_trajectory(10)
    scaled = [PoseSE3(p.rotation.copy(), 3.0 * p.translation) for p in poses]
    base = trajectory_metrics(poses, poses)
    result = trajectory_metrics(scaled, poses)
    assert abs(result.ate - base.ate) < 1e-9
    assert abs(result.rte - base.rte) < 1e-9
    assert abs(result.rre - base.rre) < 1e-9


def test_depth_identity():
    rng = np.random.default_rng(1)
    depth = rng.uniform(1.0, 9.0, size=(6, 8))
    result = depth_metrics(depth, depth)
    assert result.abs_rel == 0.0
    assert result.log_rmse == 0.0
    assert result.delta_125 == 100.0


def test_depth_uniform_scale_absorbed():
    rng = np.random.default_rng(2)
    depth = rng.uniform(1.0, 9.0, size=(6, 8))
    result = depth_metrics(2.0 * depth, depth)
    assert result.abs_rel == pytest.approx(0.0, abs=1e-12)
    assert result.delta_125 == 100.0


def test_depth_unaligned_ratio():
    rng = np.random.default_rng(3)
    depth = rng.uniform(1.0, 9.0, size=(6, 8))
    result = depth_metrics(1.3 * depth, depth, align="none")
    assert result.abs_rel == pytest.approx(0.3, rel=1e-9)
    assert result.delta_125 == 0.0


def test_depth_median_scale_invariance():
    rng = np.random.default_rng(4)
    depth = rng.uniform(1.0, 9.0, size=(6, 8))
    pred = depth * np.exp(0.05 * rng.normal(size=depth.shape))
    a = depth_metrics(pred, depth)
    b = depth_metrics(7.3 * pred, depth)
    assert a.abs_rel == pytest.approx(b.abs_rel, rel=1e-9)
    assert a.log_rmse == pytest.approx(b.log_rmse, rel=1e-9)
    assert a.delta_125 == b.delta_125


def test_depth_empty_valid_set():
    with pytest.raises(EmptyValidSet):
        depth_metrics(np.ones((3, 3)), np.ones((3, 3)), valid_mask=np.zeros((3, 3), dtype=bool))


def test_mask_identical():
    rng = np.random.default_rng(5)
    mask = (rng.uniform(size=(2, 12, 14)) > 0.6).astype(np.uint8)
    result = mask_metrics(mask, mask)
    assert result.j == 1.0
    assert result.f == 1.0


def test_mask_disjoint():
    pred = np.zeros((8, 8), dtype=np.uint8)
    gt = np.zeros((8, 8), dtype=np.uint8)
    pred[1:3, 1:3] = 1
    gt[5:7, 5:7] = 1
    result = mask_metrics(pred, gt)
    assert result.j == 0.0


def test_mask_half_coverage():
    pred = np.zeros((10, 10), dtype=np.uint8)
    gt = np.zeros((10, 10), dtype=np.uint8)
    gt[2:6, 2:6] = 1
    pred[2:4, 2:6] = 1  # exactly half of gt, no false positives
    result = mask_metrics(pred, gt)
    assert result.j == pytest.approx(0.5)


def test_mask_both_empty_scores_one():
    empty = np.zeros((6, 6), dtype=np.uint8)
    result = mask_metrics(empty, empty)
    assert result.j == 1.0
    assert result.f == 1.0


def test_mask_j_symmetry():
    rng = np.random.default_rng(6)
    a = (rng.uniform(size=(3, 9, 9)) > 0.5).astype(np.uint8)
    b = (rng.uniform(size=(3, 9, 9)) > 0.5).astype(np.uint8)
    assert mask_metrics(a, b).j == pytest.approx(mask_metrics(b, a).j, rel=1e-12)


def test_mask_f_tolerance_effect():
    pred = np.zeros((20, 20), dtype=np.uint8)
    gt = np.zeros((20, 20), dtype=np.uint8)
    gt[5:12, 5:12] = 1
    pred[6:13, 6:13] = 1  # boundaries one pixel apart
    tight = mask_metrics(pred, gt, boundary_tolerance=0.5)
    loose = mask_metrics(pred, gt, boundary_tolerance=2.0)
    assert loose.f > tight.f
