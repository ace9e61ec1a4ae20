"""Consistent video depth optimization with mask-derived uncertainty.

Per-frame log-depth grids are optimized against pairwise flow-reprojection
and temporal consistency terms, both down-weighted by an uncertainty map
initialized from the dynamic mask (``omega = clamp(1 - M, 0.01, 1)``) and
fine-tuned jointly, plus a mono-depth prior (scale-invariant, multi-scale
gradient, and surface-normal terms) anchoring the solution to the initial
depth. Poses and intrinsics stay fixed. All gradients are analytic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .errors import DimensionMismatch, NonPositiveDepth
from .geometry import Intrinsics, PoseSE3, cross3, relative_pose, unprojection_rays
from .masks import DynamicMaskSequence, resample_nearest
from .optim import LossEvaluation, MomentOptimizer, check_finite_objective
from .sampling import bilinear_sample, bilinear_weights
from .sceneio import FrameBundle

OMEGA_MIN = 0.01
OMEGA_MAX = 1.0


def _pixel_grid(height: int, width: int) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


class _PairContext:
    """Constants of one (i, j) pair: rotated rays, flow targets, samplers."""

    def __init__(self, pair, flow, poses, intrinsics, shape):
        self.i, self.j = pair
        h, w = shape
        self.shape = shape
        self.intrinsics = intrinsics
        rel = relative_pose(poses[self.i], poses[self.j])
        self.translation = rel.translation
        grid = _pixel_grid(h, w)
        self.rotated_rays = unprojection_rays(intrinsics, grid) @ rel.rotation.T
        self.target = grid + np.asarray(flow, dtype=float).reshape(-1, 2)
        self.inside = (
            (self.target[:, 0] >= 0.0)
            & (self.target[:, 0] <= w - 1.0)
            & (self.target[:, 1] >= 0.0)
            & (self.target[:, 1] <= h - 1.0)
        )
        self.n_inside = int(np.count_nonzero(self.inside))
        if self.n_inside:
            self.sample_idx, self.sample_w = bilinear_weights((h, w), self.target[self.inside])


def _flow_terms(ctx: _PairContext, depth_i, omega_i, with_grad=True):
    """Core of the pairwise flow-reprojection loss.

    Returns (value, d/dlogD_i, d/domega_i), gradients over the flat pixel grid.
    """
    d = np.asarray(depth_i, dtype=float).ravel()
    om = np.asarray(omega_i, dtype=float).ravel()
    k = ctx.intrinsics
    x = ctx.rotated_rays * d[:, None] + ctx.translation
    z = x[:, 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth(f"pair ({ctx.i}, {ctx.j}): warped point has non-positive depth")
    rx = k.fx * x[:, 0] / z + k.cx - ctx.target[:, 0]
    ry = k.fy * x[:, 1] / z + k.cy - ctx.target[:, 1]
    l1 = np.abs(rx) + np.abs(ry)
    value = float(np.sum(om * l1) + np.sum(np.log(1.0 / om)))
    if not with_grad:
        return value, None, None
    gx = om * np.sign(rx)
    gy = om * np.sign(ry)
    gz = -(gx * k.fx * x[:, 0] + gy * k.fy * x[:, 1]) / z**2
    # d x / d log D_i = rotated_rays * D_i = x - t
    d_logd = (
        gx * k.fx / z * (x[:, 0] - ctx.translation[0])
        + gy * k.fy / z * (x[:, 1] - ctx.translation[1])
        + gz * (x[:, 2] - ctx.translation[2])
    )
    d_omega = l1 - 1.0 / om
    return value, d_logd, d_omega


def _temporal_terms(ctx: _PairContext, depth_i, depth_j, omega_i, with_grad=True):
    """Core of the pairwise temporal depth-consistency loss.

    delta(a, b) = max(a/b, b/a) between the warped depth from frame i and the
    bilinearly sampled optimized depth of frame j at the flow target. Pixels
    whose flow target lands outside frame j are skipped entirely. Returns
    (value, d/dlogD_i, d/dlogD_j, d/domega_i, n_active).
    """
    h, w = ctx.shape
    n = h * w
    if ctx.n_inside == 0:
        zeros = np.zeros(n) if with_grad else None
        return 0.0, zeros, zeros, zeros, 0
    d_i = np.asarray(depth_i, dtype=float).ravel()[ctx.inside]
    flat_j = np.asarray(depth_j, dtype=float).ravel()
    om = np.asarray(omega_i, dtype=float).ravel()[ctx.inside]
    a = d_i * ctx.rotated_rays[ctx.inside, 2] + ctx.translation[2]
    if np.any(a <= 0.0):
        raise NonPositiveDepth(f"pair ({ctx.i}, {ctx.j}): warped depth is non-positive")
    corners = flat_j[ctx.sample_idx]
    b = np.einsum("nk,nk->n", ctx.sample_w, corners)
    forward = a >= b
    delta = np.where(forward, a / b, b / a)
    value = float(np.sum(om * delta) + np.sum(np.log(1.0 / om)))
    if not with_grad:
        return value, None, None, None, ctx.n_inside
    d_a = np.where(forward, 1.0 / b, -b / a**2)
    d_b = np.where(forward, -a / b**2, 1.0 / a)
    grad_i = np.zeros(n)
    grad_i[ctx.inside] = om * d_a * (a - ctx.translation[2])
    grad_j = np.zeros(n)
    np.add.at(grad_j, ctx.sample_idx, (om * d_b)[:, None] * ctx.sample_w * corners)
    grad_omega = np.zeros(n)
    grad_omega[ctx.inside] = delta - 1.0 / om
    return value, grad_i, grad_j, grad_omega, ctx.n_inside


def _full_layout(n_frames, h, w, parts, tune_omega):
    """Scatter per-frame gradient pieces into the packed CVD layout."""
    size = n_frames * h * w
    grad = np.zeros(2 * size if tune_omega else size)
    for frame, block, is_omega in parts:
        if block is None:
            continue
        offset = (size if is_omega else 0) + frame * h * w
        grad[offset : offset + h * w] += block
    return grad


def flow_loss(pair, depths, omega, poses, intrinsics, flow, tune_omega=True) -> LossEvaluation:
    """Uncertainty-weighted L1 flow-reprojection loss for one frame pair.

    Gradient layout: log-depths of all frames flattened, then (if
    ``tune_omega``) all uncertainty values.
    """
    i = pair[0]
    ctx = _PairContext(pair, flow, poses, intrinsics, depths[i].shape)
    value, d_logd, d_omega = _flow_terms(ctx, depths[i], omega[i])
    n, (h, w) = len(depths), depths[i].shape
    parts = [(i, d_logd, False)]
    if tune_omega:
        parts.append((i, d_omega, True))
    return LossEvaluation(value, _full_layout(n, h, w, parts, tune_omega))


def temporal_loss(pair, depths, omega, poses, intrinsics, flow, tune_omega=True) -> LossEvaluation:
    """Uncertainty-weighted max-ratio depth consistency loss for one pair."""
    i, j = pair
    ctx = _PairContext(pair, flow, poses, intrinsics, depths[i].shape)
    value, d_i, d_j, d_omega, _ = _temporal_terms(ctx, depths[i], depths[j], omega[i])
    n, (h, w) = len(depths), depths[i].shape
    parts = [(i, d_i, False), (j, d_j, False)]
    if tune_omega:
        parts.append((i, d_omega, True))
    return LossEvaluation(value, _full_layout(n, h, w, parts, tune_omega))


def si_loss(r: np.ndarray) -> LossEvaluation:
    """Scale-invariant loss of a log-depth difference grid.

    ``mean(r^2) - mean(r)^2``; invariant to adding a constant to ``r``.
    """
    r = np.asarray(r, dtype=float)
    n = r.size
    total = float(r.sum())
    value = float((r**2).sum()) / n - (total / n) ** 2
    grad = (2.0 / n) * r.ravel() - (2.0 * total / n**2)
    return LossEvaluation(value, grad)


def _avg_pool2(grid: np.ndarray) -> np.ndarray:
    h, w = grid.shape
    grid = grid[: (h // 2) * 2, : (w // 2) * 2]
    return 0.25 * (grid[0::2, 0::2] + grid[0::2, 1::2] + grid[1::2, 0::2] + grid[1::2, 1::2])


def grad_loss(r: np.ndarray, n_scales: int = 4) -> LossEvaluation:
    """Multi-scale L1 penalty on forward differences of the log-depth error.

    Scales are built by 2x2 average pooling; border gradients are zero, so a
    constant ``r`` costs nothing. Normalized by the full-resolution pixel
    count.
    """
    r = np.asarray(r, dtype=float)
    n_full = r.size
    pyramid = [r]
    for _ in range(n_scales - 1):
        if min(pyramid[-1].shape) < 2:
            break
        pyramid.append(_avg_pool2(pyramid[-1]))
    value = 0.0
    grads = []
    for level in pyramid:
        dx = level[:, 1:] - level[:, :-1]
        dy = level[1:, :] - level[:-1, :]
        value += float(np.abs(dx).sum() + np.abs(dy).sum())
        g = np.zeros_like(level)
        sx = np.sign(dx)
        g[:, 1:] += sx
        g[:, :-1] -= sx
        sy = np.sign(dy)
        g[1:, :] += sy
        g[:-1, :] -= sy
        grads.append(g)
    # back-propagate through the pooling pyramid
    for s in range(len(pyramid) - 1, 0, -1):
        up = np.repeat(np.repeat(grads[s], 2, axis=0), 2, axis=1) * 0.25
        grads[s - 1][: up.shape[0], : up.shape[1]] += up
    return LossEvaluation(value / n_full, grads[0].ravel() / n_full)


def _unprojected(depth: np.ndarray, rays: np.ndarray) -> np.ndarray:
    return rays * depth[:, :, None]


def _normals_from_points(points: np.ndarray):
    """Normals on the interior from central differences; returns raw cross
    products, their norms, unit normals, and the validity mask."""
    tx = points[1:-1, 2:] - points[1:-1, :-2]
    ty = points[2:, 1:-1] - points[:-2, 1:-1]
    raw = cross3(tx, ty)
    norm = np.sqrt(np.sum(raw**2, axis=2))
    valid = norm > 1e-12
    safe = np.where(valid, norm, 1.0)
    return tx, ty, raw, safe, raw / safe[:, :, None], valid


def compute_normals(depth: np.ndarray, intrinsics: Intrinsics):
    """Surface normals from central differences of unprojected points.

    Returns (normals, valid) where ``normals`` is (H, W, 3) with unit rows on
    the valid interior and zeros elsewhere; border pixels and degenerate
    (zero-length) cross products are invalid.
    """
    depth = np.asarray(depth, dtype=float)
    h, w = depth.shape
    rays = unprojection_rays(intrinsics, _pixel_grid(h, w)).reshape(h, w, 3)
    _, _, _, _, unit, valid_inner = _normals_from_points(_unprojected(depth, rays))
    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    normals[1:-1, 1:-1] = np.where(valid_inner[:, :, None], unit, 0.0)
    valid[1:-1, 1:-1] = valid_inner
    return normals, valid


class _NormalContext:
    """Prior normals and unprojection rays, fixed across optimization."""

    def __init__(self, depth_prior: np.ndarray, intrinsics: Intrinsics):
        h, w = depth_prior.shape
        self.rays = unprojection_rays(intrinsics, _pixel_grid(h, w)).reshape(h, w, 3)
        _, _, _, _, self.prior_unit, self.prior_valid = _normals_from_points(
            _unprojected(np.asarray(depth_prior, dtype=float), self.rays)
        )


def _normal_terms(ctx: _NormalContext, depth_hat: np.ndarray, with_grad=True):
    depth_hat = np.asarray(depth_hat, dtype=float)
    h, w = depth_hat.shape
    points = _unprojected(depth_hat, ctx.rays)
    tx, ty, _, safe, unit, valid_hat = _normals_from_points(points)
    valid = valid_hat & ctx.prior_valid
    dots = np.sum(unit * ctx.prior_unit, axis=2)
    value = float(np.sum(np.where(valid, 1.0 - dots, 0.0)))
    if not with_grad:
        return value, None
    # dL/dn through the normalization, zeroed on invalid pixels
    gn = (-ctx.prior_unit + unit * dots[:, :, None]) / safe[:, :, None]
    gn = np.where(valid[:, :, None], gn, 0.0)
    g_tx = cross3(ty, gn)
    g_ty = cross3(gn, tx)
    g_points = np.zeros((h, w, 3))
    g_points[1:-1, 2:] += g_tx
    g_points[1:-1, :-2] -= g_tx
    g_points[2:, 1:-1] += g_ty
    g_points[:-2, 1:-1] -= g_ty
    return value, np.sum(g_points * points, axis=2).ravel()


def normal_loss(depth_hat: np.ndarray, depth_prior: np.ndarray, intrinsics: Intrinsics) -> LossEvaluation:
    """Sum of (1 - n_hat . n_prior) over pixels where both normals exist.

    Gradient is with respect to the log of ``depth_hat``.
    """
    depth_hat = np.asarray(depth_hat, dtype=float)
    depth_prior = np.asarray(depth_prior, dtype=float)
    if depth_hat.shape != depth_prior.shape:
        raise DimensionMismatch(f"depth shapes {depth_hat.shape} != {depth_prior.shape}")
    ctx = _NormalContext(depth_prior, intrinsics)
    value, grad = _normal_terms(ctx, depth_hat)
    return LossEvaluation(value, grad)


def prior_loss(
    depth_hat: np.ndarray,
    depth_prior: np.ndarray,
    intrinsics: Intrinsics,
    lambda_grad: float = 1.0,
    lambda_normal: float = 4.0,
) -> LossEvaluation:
    """Mono-depth prior: scale-invariant + gradient + surface-normal terms."""
    depth_hat = np.asarray(depth_hat, dtype=float)
    depth_prior = np.asarray(depth_prior, dtype=float)
    r = np.log(depth_hat) - np.log(depth_prior)
    si = si_loss(r)
    grad_term = grad_loss(r)
    normal_term = normal_loss(depth_hat, depth_prior, intrinsics)
    value = si.value + lambda_grad * grad_term.value + lambda_normal * normal_term.value
    gradient = (
        si.gradient + lambda_grad * grad_term.gradient + lambda_normal * normal_term.gradient
    )
    return LossEvaluation(value, gradient)


@dataclass
class DepthSolution:
    """Optimized depths at working resolution plus the 2x upsampled output."""

    depths: np.ndarray
    omega: np.ndarray
    upsampled: np.ndarray
    objective_trace: np.ndarray
    temporal_offset: float

    @property
    def final_objective(self) -> float:
        return float(self.objective_trace[-1])

    @property
    def final_objective_adjusted(self) -> float:
        """Objective with the structural minimum of the max-ratio term removed."""
        return self.final_objective - self.temporal_offset


def _resize_bilinear(grid: np.ndarray, new_hw: tuple[int, int]) -> np.ndarray:
    h, w = grid.shape[:2]
    new_h, new_w = new_hw
    xs = (np.arange(new_w) + 0.5) * w / new_w - 0.5
    ys = (np.arange(new_h) + 0.5) * h / new_h - 0.5
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx.ravel(), gy.ravel()], axis=1)
    sampled = bilinear_sample(grid, points)
    if grid.ndim == 3:
        return sampled.reshape(new_h, new_w, grid.shape[2])
    return sampled.reshape(new_h, new_w)


def prepare_inputs(
    frames: list[FrameBundle],
    masks: DynamicMaskSequence | None,
    intrinsics: Intrinsics,
    resolution: tuple[int, int] | None,
):
    """Resample depths, flows, and masks to the working (width, height).

    Depth and flow are resampled bilinearly (flow components rescaled), masks
    by nearest neighbor so they stay binary.
    """
    src_w, src_h = frames[0].width, frames[0].height
    if resolution is None:
        resolution = (src_w, src_h)
    w, h = resolution
    sx, sy = w / src_w, h / src_h
    if (w, h) == (src_w, src_h):
        depths = [f.depth.copy() for f in frames]
        fwd = [f.flow_forward.copy() if f.flow_forward is not None else None for f in frames]
        bwd = [f.flow_backward.copy() if f.flow_backward is not None else None for f in frames]
        mask_seq = masks
        intr = intrinsics
    else:
        depths = [_resize_bilinear(f.depth, (h, w)) for f in frames]

        def _flow(flow):
            if flow is None:
                return None
            resized = _resize_bilinear(flow, (h, w))
            resized[:, :, 0] *= sx
            resized[:, :, 1] *= sy
            return resized

        fwd = [_flow(f.flow_forward) for f in frames]
        bwd = [_flow(f.flow_backward) for f in frames]
        mask_seq = resample_nearest(masks, (h, w)) if masks is not None else None
        intr = intrinsics.resized((src_w, src_h), (w, h))
    return depths, fwd, bwd, mask_seq, intr


def optimize_depth(
    frames: list[FrameBundle],
    masks: DynamicMaskSequence | None,
    poses: list[PoseSE3],
    intrinsics: Intrinsics,
    lambda_flow: float = 1.0,
    lambda_temp: float = 0.2,
    lambda_prior: float = 1.0,
    lambda_grad: float = 1.0,
    lambda_normal: float = 4.0,
    resolution: tuple[int, int] | None = (336, 144),
    steps: int = 500,
    learning_rate: float = 3e-3,
    omega_lr_fraction: float = 0.1,
    final_lr_fraction: float = 0.01,
    adam_eps: float = 2.0,
    uncertainty: str = "mask",
) -> DepthSolution:
    """Optimize video depth over adjacent frame pairs in both directions.

    ``uncertainty='mask'`` initializes the per-pixel weights from the dynamic
    mask and fine-tunes them at a reduced step size; ``'free'`` reproduces the
    learned-uncertainty baseline (initialized to 1, optimized at the full
    step). Backward pairs are used where backward flows are available. The
    final depths are additionally upsampled 2x.
    """
    if uncertainty not in ("mask", "free"):
        raise ValueError(f"unknown uncertainty mode {uncertainty!r}")
    if len(poses) != len(frames):
        raise ValueError(f"got {len(poses)} poses for {len(frames)} frames")
    depths, fwd, bwd, mask_seq, intr = prepare_inputs(frames, masks, intrinsics, resolution)
    t_total = len(frames)
    h, w = depths[0].shape
    prior = np.stack(depths)
    log_depth = np.log(prior)
    if uncertainty == "mask":
        if mask_seq is None:
            raise ValueError("uncertainty='mask' requires masks")
        omega = np.clip(1.0 - mask_seq.masks.astype(float), OMEGA_MIN, OMEGA_MAX)
        omega_lr = learning_rate * omega_lr_fraction
    else:
        omega = np.ones((t_total, h, w))
        omega_lr = learning_rate

    pair_contexts = []
    for i in range(t_total - 1):
        pair_contexts.append(_PairContext((i, i + 1), fwd[i], poses, intr, (h, w)))
        if bwd[i + 1] is not None:
            pair_contexts.append(_PairContext((i + 1, i), bwd[i + 1], poses, intr, (h, w)))
    normal_contexts = [_NormalContext(prior[t], intr) for t in range(t_total)]

    # a large epsilon keeps steps proportional to small gradients, so the
    # ~100x mask down-weighting survives the per-parameter step normalization
    depth_opt = MomentOptimizer(t_total * h * w, learning_rate, total_steps=steps,
                                final_lr_fraction=final_lr_fraction, eps=adam_eps)
    omega_opt = MomentOptimizer(t_total * h * w, omega_lr, total_steps=steps,
                                final_lr_fraction=final_lr_fraction, eps=adam_eps)

    def evaluate(cur_depths, cur_omega, with_grad=True):
        value = 0.0
        offset = 0.0
        g_depth = np.zeros((t_total, h * w)) if with_grad else None
        g_omega = np.zeros((t_total, h * w)) if with_grad else None
        for ctx in pair_contexts:
            i, j = ctx.i, ctx.j
            fv, f_di, f_om = _flow_terms(ctx, cur_depths[i], cur_omega[i], with_grad)
            tv, t_di, t_dj, t_om, n_act = _temporal_terms(
                ctx, cur_depths[i], cur_depths[j], cur_omega[i], with_grad
            )
            value += lambda_flow * fv + lambda_temp * tv
            offset += lambda_temp * n_act
            if with_grad:
                g_depth[i] += lambda_flow * f_di + lambda_temp * t_di
                g_depth[j] += lambda_temp * t_dj
                g_omega[i] += lambda_flow * f_om + lambda_temp * t_om
        for t in range(t_total):
            r = np.log(cur_depths[t]) - np.log(prior[t])
            si = si_loss(r)
            grad_term = grad_loss(r)
            nv, ng = _normal_terms(normal_contexts[t], cur_depths[t], with_grad)
            value += lambda_prior * (
                si.value + lambda_grad * grad_term.value + lambda_normal * nv
            )
            if with_grad:
                g_depth[t] += lambda_prior * (
                    si.gradient + lambda_grad * grad_term.gradient + lambda_normal * ng
                )
        return value, g_depth, g_omega, offset

    cur_depths = [np.exp(log_depth[t]) for t in range(t_total)]
    value, g_depth, g_omega, offset = evaluate(cur_depths, omega)
    check_finite_objective(value, "depth optimization")
    best_value = value
    best_depth = log_depth.copy()
    best_omega = omega.copy()
    trace = np.empty(steps + 1)
    trace[0] = best_value
    for step in range(steps):
        log_depth = log_depth - depth_opt.step(g_depth.ravel()).reshape(log_depth.shape)
        omega = np.clip(
            omega - omega_opt.step(g_omega.ravel()).reshape(omega.shape),
            OMEGA_MIN,
            OMEGA_MAX,
        )
        cur_depths = [np.exp(log_depth[t]) for t in range(t_total)]
        value, g_depth, g_omega, offset = evaluate(cur_depths, omega)
        check_finite_objective(value, f"depth optimization step {step}")
        if value < best_value:
            best_value = value
            best_depth = log_depth.copy()
            best_omega = omega.copy()
        trace[step + 1] = best_value
    final = np.exp(best_depth)
    upsampled = np.stack([_resize_bilinear(final[t], (2 * h, 2 * w)) for t in range(t_total)])
    return DepthSolution(final, best_omega, upsampled, trace, offset)


class DepthOptimizer(BaseEstimator):
    """Scikit-learn style wrapper around :func:`optimize_depth`."""

    def __init__(
        self,
        lambda_flow: float = 1.0,
        lambda_temp: float = 0.2,
        lambda_prior: float = 1.0,
        lambda_grad: float = 1.0,
        lambda_normal: float = 4.0,
        resolution: tuple[int, int] | None = (336, 144),
        steps: int = 500,
        learning_rate: float = 3e-3,
        omega_lr_fraction: float = 0.1,
        final_lr_fraction: float = 0.01,
        adam_eps: float = 2.0,
        uncertainty: str = "mask",
    ):
        self.lambda_flow = lambda_flow
        self.lambda_temp = lambda_temp
        self.lambda_prior = lambda_prior
        self.lambda_grad = lambda_grad
        self.lambda_normal = lambda_normal
        self.resolution = resolution
        self.steps = steps
        self.learning_rate = learning_rate
        self.omega_lr_fraction = omega_lr_fraction
        self.final_lr_fraction = final_lr_fraction
        self.adam_eps = adam_eps
        self.uncertainty = uncertainty

    def fit(self, frames, masks=None, poses=None, intrinsics=None):
        if poses is None or intrinsics is None:
            raise ValueError("poses and intrinsics are required")
        solution = optimize_depth(
            frames,
            masks,
            poses,
            intrinsics,
            lambda_flow=self.lambda_flow,
            lambda_temp=self.lambda_temp,
            lambda_prior=self.lambda_prior,
            lambda_grad=self.lambda_grad,
            lambda_normal=self.lambda_normal,
            resolution=self.resolution,
            steps=self.steps,
            learning_rate=self.learning_rate,
            omega_lr_fraction=self.omega_lr_fraction,
            final_lr_fraction=self.final_lr_fraction,
            adam_eps=self.adam_eps,
            uncertainty=self.uncertainty,
        )
        self.depths_ = solution.depths
        self.omega_ = solution.omega
        self.upsampled_depths_ = solution.upsampled
        self.objective_trace_ = solution.objective_trace
        self.solution_ = solution
        return self
