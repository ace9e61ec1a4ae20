"""Consistent video depth: pairwise losses, priors, and optimization."""

import math

import numpy as np
import pytest

from dynrefine.cvd import (
    OMEGA_MIN,
    compute_normals,
    flow_loss,
    grad_loss,
    normal_loss,
    optimize_depth,
    prior_loss,
    si_loss,
    temporal_loss,
)
from dynrefine.errors import NonPositiveDepth
from dynrefine.gradcheck import central_difference, relative_gradient_error
from dynrefine.geometry import Intrinsics, PoseSE3
from dynrefine.masks import DynamicMaskSequence, merge_masks
from dynrefine.metrics import depth_metrics
from dynrefine.synth import generate

import oracles
from conftest import random_pair_state
from scenes import cvd_scene

K = Intrinsics(20.0, 20.0, 2.5, 2.0)
IDENTITY = [PoseSE3.identity(), PoseSE3.identity()]


def test_flow_loss_zero_for_static_configuration():
    # power-of-two focal and depth make the projection round trip bit-exact
    exact_k = Intrinsics(16.0, 16.0, 2.5, 2.0)
    depths = [np.full((5, 6), 4.0), np.full((5, 6), 4.0)]
    omega = [np.ones((5, 6)), np.ones((5, 6))]
    flow = np.zeros((5, 6, 2))
    ev = flow_loss((0, 1), depths, omega, IDENTITY, exact_k, flow)
    assert ev.value == 0.0


def test_flow_loss_log_barrier_at_min_omega():
    depths = [np.full((5, 6), 3.0), np.full((5, 6), 3.0)]
    omega = [np.full((5, 6), 0.01), np.full((5, 6), 0.01)]
    flow = np.zeros((5, 6, 2))
    ev = flow_loss((0, 1), depths, omega, IDENTITY, K, flow)
    assert ev.value == pytest.approx(30 * math.log(100.0), rel=1e-12)


def test_flow_loss_matches_scalar_oracle(rng):
    for _ in range(8):
        depths, omega, poses, intr, flow = random_pair_state(rng)
        ev = flow_loss((0, 1), depths, omega, poses, intr, flow)
        rel = poses[1].invert().compose(poses[0])
        expected = oracles.flow_value(
            depths[0].tolist(), omega[0].tolist(), rel.matrix().tolist(),
            intr.fx, intr.fy, intr.cx, intr.cy, flow.tolist(),
        )
        assert ev.value == pytest.approx(expected, rel=1e-12)


def test_flow_loss_masked_pixel_is_damped_exactly():
    rng = np.random.default_rng(0)
    depths, omega_full, poses, intr, flow = random_pair_state(rng)
    ones = [np.ones_like(omega_full[0]), np.ones_like(omega_full[1])]
    base = flow_loss((0, 1), depths, ones, poses, intr, flow, tune_omega=False)
    damped_omega = [ones[0].copy(), ones[1]]
    damped_omega[0][2, 3] = 0.01
    damped = flow_loss((0, 1), depths, damped_omega, poses, intr, flow, tune_omega=False)
    # the damped pixel's unit-weight residual, recomputed by hand
    rel = poses[1].invert().compose(poses[0])
    d = depths[0][2, 3]
    x = [(3 - intr.cx) / intr.fx * d, (2 - intr.cy) / intr.fy * d, d]
    y = rel.transform(np.array(x))
    u = intr.fx * y[0] / y[2] + intr.cx
    v = intr.fy * y[1] / y[2] + intr.cy
    residual = abs(u - (3 + flow[2, 3, 0])) + abs(v - (2 + flow[2, 3, 1]))
    expected_delta = (0.01 - 1.0) * residual + math.log(1.0 / 0.01)
    assert damped.value - base.value == pytest.approx(expected_delta, abs=1e-10)


def test_temporal_loss_identity_configuration_is_pixel_count():
    depths = [np.full((5, 6), 3.0), np.full((5, 6), 3.0)]
    omega = [np.ones((5, 6)), np.ones((5, 6))]
    flow = np.zeros((5, 6, 2))
    ev = temporal_loss((0, 1), depths, omega, IDENTITY, K, flow)
    assert ev.value == pytest.approx(30.0, rel=1e-12)  # delta(d, d) = 1 per pixel


def test_temporal_max_ratio_is_symmetric():
    omega = [np.ones((4, 4)), np.ones((4, 4))]
    flow = np.zeros((4, 4, 2))
    small_k = Intrinsics(20.0, 20.0, 1.5, 1.5)
    forward = temporal_loss(
        (0, 1), [np.full((4, 4), 2.0), np.full((4, 4), 1.0)], omega, IDENTITY, small_k, flow
    )
    backward = temporal_loss(
        (0, 1), [np.full((4, 4), 1.0), np.full((4, 4), 2.0)], omega, IDENTITY, small_k, flow
    )
    assert forward.value == pytest.approx(16 * 2.0, rel=1e-12)
    assert backward.value == pytest.approx(16 * 2.0, rel=1e-12)


def test_temporal_loss_matches_scalar_oracle(rng):
    for _ in range(8):
        depths, omega, poses, intr, flow = random_pair_state(rng)
        ev = temporal_loss((0, 1), depths, omega, poses, intr, flow)
        rel = poses[1].invert().compose(poses[0])
        expected = oracles.temporal_value(
            depths[0].tolist(), depths[1].tolist(), omega[0].tolist(),
            rel.matrix().tolist(), intr.fx, intr.fy, intr.cx, intr.cy, flow.tolist(),
        )
        assert ev.value == pytest.approx(expected, rel=1e-12)


def test_flow_loss_rejects_nonpositive_warped_depth():
    depths = [np.full((4, 4), 1.0), np.full((4, 4), 1.0)]
    omega = [np.ones((4, 4)), np.ones((4, 4))]
    # camera j two units ahead of the surface: warped z goes negative
    poses = [PoseSE3.identity(), PoseSE3(np.eye(3), np.array([0.0, 0.0, 2.0]))]
    with pytest.raises(NonPositiveDepth):
        flow_loss((0, 1), depths, omega, poses, K, np.zeros((4, 4, 2)))


def test_si_loss_zero_for_constant():
    assert si_loss(np.zeros((4, 5))).value == 0.0
    assert si_loss(np.full((4, 5), 0.7)).value == pytest.approx(0.0, abs=1e-12)


def test_si_loss_two_pixel_example():
    ev = si_loss(np.array([[0.0, 2.0]]))
    assert ev.value == pytest.approx(1.0, rel=1e-12)


def test_si_loss_shift_invariance():
    rng = np.random.default_rng(1)
    r = rng.normal(size=(6, 7))
    a = si_loss(r).value
    b = si_loss(r + 3.7).value
    assert abs(a - b) < 1e-12


def test_si_loss_matches_scalar_oracle(rng):
    r = rng.normal(size=(5, 6))
    assert si_loss(r).value == pytest.approx(oracles.si_value(r.tolist()), rel=1e-12)


def test_grad_loss_zero_for_constant():
    assert grad_loss(np.full((8, 8), 1.3)).value == 0.0


def test_grad_loss_matches_scalar_oracle(rng):
    for shape in ((8, 8), (7, 9), (5, 6)):
        r = rng.normal(size=shape)
        assert grad_loss(r).value == pytest.approx(oracles.grad_value(r.tolist()), rel=1e-12)


def test_normal_loss_zero_for_identical_depths(rng):
    depth = 3.0 * np.exp(0.1 * rng.normal(size=(6, 7)))
    assert normal_loss(depth, depth, K).value == pytest.approx(0.0, abs=1e-12)


def test_normal_loss_zero_for_scaled_frontoparallel():
    depth = np.full((6, 7), 4.0)
    ev = normal_loss(2.5 * depth, depth, K)
    assert ev.value == pytest.approx(0.0, abs=1e-12)


def test_normal_loss_matches_scalar_oracle(rng):
    for _ in range(5):
        prior = 3.0 * np.exp(0.1 * rng.normal(size=(5, 6)))
        hat = prior * np.exp(0.05 * rng.normal(size=(5, 6)))
        ev = normal_loss(hat, prior, K)
        expected = oracles.normal_value(
            hat.tolist(), prior.tolist(), K.fx, K.fy, K.cx, K.cy
        )
        assert ev.value == pytest.approx(expected, rel=1e-10)


def test_compute_normals_frontoparallel_points_backward():
    normals, valid = compute_normals(np.full((5, 6), 2.0), K)
    assert valid[1:-1, 1:-1].all()
    assert not valid[0].any() and not valid[-1].any()
    np.testing.assert_allclose(normals[2, 3], [0.0, 0.0, 1.0])


def test_prior_loss_zero_for_scaled_constant_depth():
    depth = np.full((6, 8), 3.0)
    ev = prior_loss(2.0 * depth, depth, K)
    assert ev.value == pytest.approx(0.0, abs=1e-12)


def test_prior_loss_zero_for_identity(rng):
    depth = 3.0 * np.exp(0.1 * rng.normal(size=(6, 8)))
    ev = prior_loss(depth, depth, K)
    assert ev.value == pytest.approx(0.0, abs=1e-12)


def test_gradient_spot_checks(rng):
    h, w = 5, 6
    n = h * w
    for _ in range(3):
        depths, omega, poses, intr, flow = random_pair_state(rng, h, w)

        def flow_fn(x):
            dd = [depths[t] * np.exp(x[t * n:(t + 1) * n].reshape(h, w)) for t in range(2)]
            om = [omega[t] + x[2 * n + t * n:2 * n + (t + 1) * n].reshape(h, w) for t in range(2)]
            return flow_loss((0, 1), dd, om, poses, intr, flow).value

        ev = flow_loss((0, 1), depths, omega, poses, intr, flow)
        numeric = central_difference(flow_fn, np.zeros(4 * n))
        assert relative_gradient_error(ev.gradient, numeric) < 1e-5

        def temp_fn(x):
            dd = [depths[t] * np.exp(x[t * n:(t + 1) * n].reshape(h, w)) for t in range(2)]
            om = [omega[t] + x[2 * n + t * n:2 * n + (t + 1) * n].reshape(h, w) for t in range(2)]
            return temporal_loss((0, 1), dd, om, poses, intr, flow).value

        ev = temporal_loss((0, 1), depths, omega, poses, intr, flow)
        numeric = central_difference(temp_fn, np.zeros(4 * n))
        assert relative_gradient_error(ev.gradient, numeric) < 1e-5

        prior = 3.0 * np.exp(0.1 * rng.normal(size=(h, w)))
        hat = prior * np.exp(0.05 * rng.normal(size=(h, w)))
        ev = prior_loss(hat, prior, intr)
        numeric = central_difference(
            lambda x: prior_loss(hat * np.exp(x.reshape(h, w)), prior, intr).value,
            np.zeros(n),
        )
        assert relative_gradient_error(ev.gradient, numeric) < 1e-5


def _combined_reference(frames, masks, poses, intrinsics, lambdas=(1.0, 0.2, 1.0)):
    """Re-assemble the total objective from the public per-term losses."""
    lf, lt, lp = lambdas
    depths = [f.depth for f in frames]
    t_total = len(frames)
    omega = np.clip(1.0 - masks.masks.astype(float), OMEGA_MIN, 1.0)
    omega_list = [omega[t] for t in range(t_total)]
    value = 0.0
    for i in range(t_total - 1):
        pairs = [((i, i + 1), frames[i].flow_forward)]
        if frames[i + 1].flow_backward is not None:
            pairs.append(((i + 1, i), frames[i + 1].flow_backward))
        for pair, flow in pairs:
            fv = flow_loss(pair, depths, omega_list, poses, intrinsics, flow).value
            tv = temporal_loss(pair, depths, omega_list, poses, intrinsics, flow).value
            value += lf * fv + lt * tv
    for t in range(t_total):
        value += lp * prior_loss(depths[t], depths[t], intrinsics).value
    return value


def test_combined_objective_is_weighted_sum_of_components():
    scene = generate(cvd_scene(seed=0, dynamic=False, frame_count=4))
    frames = scene.frames()
    masks = merge_masks(scene.instance_masks, shape=(4, 48, 64))
    solution = optimize_depth(
        frames, masks, scene.gt_poses, scene.intrinsics, resolution=None, steps=0
    )
    expected = _combined_reference(frames, masks, scene.gt_poses, scene.intrinsics)
    assert solution.objective_trace[0] == pytest.approx(expected, rel=1e-12)


def test_optimize_depth_improves_noisy_static_scene():
    scene = generate(cvd_scene(seed=1, dynamic=False))
    masks = merge_masks(scene.instance_masks, shape=(8, 48, 64))
    gt = np.stack(scene.gt_depths)
    init = depth_metrics(np.stack(scene.noisy_depths), gt)
    solution = optimize_depth(
        scene.frames(), masks, scene.gt_poses, scene.intrinsics, resolution=None, steps=300
    )
    opt = depth_metrics(solution.depths, gt)
    assert opt.abs_rel < init.abs_rel
    assert (np.diff(solution.objective_trace) <= 0).all()
    assert solution.upsampled.shape == (8, 96, 128)
    assert solution.final_objective_adjusted < solution.final_objective


def test_optimize_depth_masked_region_protected():
    scene = generate(cvd_scene(seed=2, dynamic=True))
    masks = merge_masks(scene.instance_masks)
    gt = np.stack(scene.gt_depths)
    mask_arr = masks.masks.astype(bool)
    init = depth_metrics(np.stack(scene.noisy_depths), gt, valid_mask=mask_arr)
    solution = optimize_depth(
        scene.frames(), masks, scene.gt_poses, scene.intrinsics, resolution=None
    )
    after = depth_metrics(solution.depths, gt, valid_mask=mask_arr)
    assert after.abs_rel <= init.abs_rel * 1.05


def test_mask_mode_with_empty_mask_equals_unit_omega_run():
    scene = generate(cvd_scene(seed=3, dynamic=False, frame_count=4))
    frames = scene.frames()
    empty = DynamicMaskSequence.zeros(4, 48, 64)
    kwargs = dict(resolution=None, steps=40)
    masked = optimize_depth(
        frames, empty, scene.gt_poses, scene.intrinsics,
        uncertainty="mask", omega_lr_fraction=1.0, **kwargs,
    )
    free = optimize_depth(
        frames, None, scene.gt_poses, scene.intrinsics, uncertainty="free", **kwargs
    )
    assert (masked.depths == free.depths).all()
    assert (masked.omega == free.omega).all()


def test_optimize_depth_resamples_resolution():
    scene = generate(cvd_scene(seed=4, dynamic=False, frame_count=3))
    masks = merge_masks(scene.instance_masks, shape=(3, 48, 64))
    solution = optimize_depth(
        scene.frames(), masks, scene.gt_poses, scene.intrinsics,
        resolution=(32, 24), steps=5,
    )
    assert solution.depths.shape == (3, 24, 32)
    assert solution.upsampled.shape == (3, 48, 64)
