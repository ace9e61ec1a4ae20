"""Shared random-instance builders for gradient and oracle tests."""

import numpy as np
import pytest

from dynrefine.ba import PointTrack, WindowProblem
from dynrefine.geometry import Intrinsics, PoseSE3
from dynrefine.track4d import Track3D


def random_window_problem(rng, n_rel=None, n_tracks=None, n_anchors=1):
    """Small reprojection problem with O(0.1) pose scales and safe depths."""
    if n_rel is None:
        n_rel = int(rng.integers(4, 9))
    if n_tracks is None:
        n_tracks = int(rng.integers(1, 5))
    rel = [
        PoseSE3.exp(np.concatenate([0.05 * rng.normal(size=3), 0.05 * rng.normal(size=3)]))
        for _ in range(n_rel)
    ]
    intr = Intrinsics(
        60.0 * float(np.exp(0.1 * rng.normal())),
        60.0 * float(np.exp(0.1 * rng.normal())),
        31.5,
        23.5,
    )
    tracks = []
    anchors = list(range(min(n_anchors, n_rel - 2)))
    window = min(8, n_rel + 1 - max(anchors))
    for i in range(n_tracks):
        points = rng.uniform(8.0, 56.0, size=(window, 2))
        weights = (rng.uniform(size=window) > 0.3).astype(float)
        weights[0] = 1.0
        tracks.append(
            PointTrack(anchors[i % len(anchors)], points, weights, float(rng.uniform(2.0, 6.0)))
        )
    return WindowProblem(0, rel, intr, tracks)


def random_pair_state(rng, height=5, width=6):
    """Depths, uncertainties, poses, and flow for one CVD frame pair.

    Flows are kept small so temporal-loss targets stay in bounds and away
    from the max-ratio kink.
    """
    depths = [3.0 * np.exp(0.1 * rng.normal(size=(height, width))) for _ in range(2)]
    omega = [np.clip(rng.uniform(0.05, 0.95, size=(height, width)), 0.01, 1.0) for _ in range(2)]
    poses = [
        PoseSE3.identity(),
        PoseSE3.exp(np.concatenate([0.02 * rng.normal(size=3), 0.05 * rng.normal(size=3)])),
    ]
    flow = 0.4 * rng.normal(size=(height, width, 2))
    intr = Intrinsics(20.0, 20.0, (width - 1) / 2.0, (height - 1) / 2.0)
    return depths, omega, poses, intr, flow


def random_track3d(rng, n=None):
    if n is None:
        n = int(rng.integers(4, 11))
    centers = 0.3 * rng.normal(size=(n, 3))
    points = rng.normal(size=(n, 3)) + np.array([0.0, 0.0, 5.0])
    rays = points - centers
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    offsets = 0.2 * rng.normal(size=n)
    return Track3D(np.arange(n), np.zeros((n, 2)), points, rays, centers, offsets)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
