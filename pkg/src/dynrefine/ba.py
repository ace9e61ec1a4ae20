"""Masked sliding-window bundle adjustment with global joint refinement.

Camera motion is parameterized by consecutive relative transforms
``rel[t] = P(t -> t+1)``; reprojection chains them across each track's
8-frame window, weighted by per-point mask values so dynamic points drop out
of the objective. Focal lengths and anchor depths are optimized in log-space.
Gradients are analytic: pose derivatives use left perturbations
``rel <- exp(delta) @ rel`` evaluated at delta = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from .errors import NonPositiveDepth, WindowTooShort
from .geometry import Intrinsics, PoseSE3, batch_se3_exp, relative_pose
from .masks import DynamicMaskSequence, sample_mask_many
from .optim import LossEvaluation, MomentOptimizer, check_finite_objective
from .sampling import bilinear_sample
from .sceneio import FrameBundle


@dataclass
class PointTrack:
    """A flow-chained track: pixel positions, mask weights, and anchor depth.

    ``mask_weights[i]`` is ``1 - M(p_i)`` for in-bounds positions and 0 once
    the chain has left the image; the anchor depth is the track's only 3-D
    parameter and stays positive through its log parameterization.
    """

    anchor_frame: int
    points: np.ndarray
    mask_weights: np.ndarray
    anchor_depth: float

    def is_static(self) -> bool:
        return bool(np.all(self.mask_weights == 1.0))


@dataclass
class WindowProblem:
    """Reprojection problem over consecutive frames.

    ``rel_poses[k]`` maps camera ``first_frame + k`` coordinates to camera
    ``first_frame + k + 1`` coordinates. A sliding window holds 8 frames
    (7 relative transforms); the global stage reuses the same structure over
    the whole sequence with tracks anchored at their window starts.
    """

    first_frame: int
    rel_poses: list[PoseSE3]
    intrinsics: Intrinsics
    tracks: list[PointTrack]

    @property
    def parameter_count(self) -> int:
        return 6 * len(self.rel_poses) + 2 + len(self.tracks)

    def perturbed(self, delta: np.ndarray) -> "WindowProblem":
        """Apply a packed parameter step (pose tangents, log-f, log-depths)."""
        n_rel = len(self.rel_poses)
        rel = [
            pose.perturbed(delta[6 * k : 6 * k + 6]) for k, pose in enumerate(self.rel_poses)
        ]
        d_f = delta[6 * n_rel : 6 * n_rel + 2]
        intr = Intrinsics(
            self.intrinsics.fx * float(np.exp(d_f[0])),
            self.intrinsics.fy * float(np.exp(d_f[1])),
            self.intrinsics.cx,
            self.intrinsics.cy,
        )
        d_depth = delta[6 * n_rel + 2 :]
        tracks = [
            replace(t, anchor_depth=t.anchor_depth * float(np.exp(d_depth[i])))
            for i, t in enumerate(self.tracks)
        ]
        return WindowProblem(self.first_frame, rel, intr, tracks)


@dataclass
class WindowResult:
    problem: WindowProblem
    objective_trace: np.ndarray


@dataclass
class RefineResult:
    """Output of the two-stage refinement."""

    poses: list[PoseSE3]
    intrinsics: Intrinsics
    tracks: list[PointTrack]
    window_traces: list[np.ndarray]
    global_trace: np.ndarray


def _inside(points: np.ndarray, width: int, height: int) -> np.ndarray:
    return (
        (points[:, 0] >= 0.0)
        & (points[:, 0] <= width - 1.0)
        & (points[:, 1] >= 0.0)
        & (points[:, 1] <= height - 1.0)
    )


def chain_tracks(
    frames: list[FrameBundle],
    masks: DynamicMaskSequence | None = None,
    grid_size: int = 16,
    window_size: int = 8,
) -> list[PointTrack]:
    """Chain a uniform grid of points through the window's optical flows.

    Positions advance by bilinear flow sampling; once a chain leaves the image
    it is truncated there and all later weights are 0. With ``masks`` given,
    in-bounds weights are ``1 - M(p_i)`` sampled nearest-neighbor. Tracks with
    no usable reprojection residual (out of bounds from step 1 on) are dropped.
    """
    if len(frames) < window_size:
        raise WindowTooShort(f"need {window_size} frames, got {len(frames)}")
    frames = frames[:window_size]
    for f in frames[:-1]:
        if f.flow_forward is None:
            raise WindowTooShort(f"frame {f.index} has no forward flow")
    width, height = frames[0].width, frames[0].height
    t0 = frames[0].index
    gx = (np.arange(grid_size) + 0.5) * width / grid_size - 0.5
    gy = (np.arange(grid_size) + 0.5) * height / grid_size - 0.5
    xs, ys = np.meshgrid(gx, gy)
    pos = np.stack([xs.ravel(), ys.ravel()], axis=1)
    n = pos.shape[0]

    positions = np.empty((n, window_size, 2))
    in_bounds = np.zeros((n, window_size), dtype=bool)
    mask_value = np.zeros((n, window_size))
    positions[:, 0] = pos
    in_bounds[:, 0] = True
    if masks is not None:
        mask_value[:, 0] = sample_mask_many(masks, t0, pos)
    alive = np.ones(n, dtype=bool)
    for i in range(window_size - 1):
        if not alive.any():
            positions[:, i + 1 :] = positions[:, i : i + 1]
            break
        step = bilinear_sample(frames[i].flow_forward, positions[alive, i])
        nxt = positions[:, i].copy()
        nxt[alive] += step
        positions[:, i + 1] = nxt
        alive = alive & _inside(nxt, width, height)
        in_bounds[:, i + 1] = alive
        if masks is not None and alive.any():
            mask_value[alive, i + 1] = sample_mask_many(masks, t0 + i + 1, nxt[alive])

    weights = in_bounds * (1.0 - mask_value)
    depths = bilinear_sample(frames[0].depth, positions[:, 0])
    tracks = []
    for k in range(n):
        if not in_bounds[k, 1:].any():
            continue
        tracks.append(
            PointTrack(t0, positions[k].copy(), weights[k].copy(), float(depths[k]))
        )
    return tracks


def _cross_batched(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


class _Evaluator:
    """Vectorized objective/gradient evaluation over a compiled problem.

    Parameter layout: 6 tangent entries per relative pose (axis-angle then
    translation), then (log fx, log fy), then one log anchor depth per track.
    Tracks are processed in groups sharing an anchor frame so the pose chain
    is computed once per group.
    """

    def __init__(self, problem: WindowProblem):
        self.n_rel = len(problem.rel_poses)
        self.rot = np.stack([p.rotation for p in problem.rel_poses])
        self.trans = np.stack([p.translation for p in problem.rel_poses])
        self.log_f = np.log([problem.intrinsics.fx, problem.intrinsics.fy])
        self.cx = problem.intrinsics.cx
        self.cy = problem.intrinsics.cy
        self.first_frame = problem.first_frame
        self.n_tracks = len(problem.tracks)
        if self.n_tracks:
            self.window_size = problem.tracks[0].points.shape[0]
            self.anchor_off = np.array(
                [t.anchor_frame - problem.first_frame for t in problem.tracks], dtype=int
            )
            if np.any(self.anchor_off < 0) or np.any(
                self.anchor_off + self.window_size - 1 > self.n_rel
            ):
                raise ValueError("track window extends outside the problem's pose range")
            self.anchor_px = np.stack([t.points[0] for t in problem.tracks])
            self.targets = np.stack([t.points for t in problem.tracks])
            self.weights = np.stack([t.mask_weights for t in problem.tracks])
            self.log_d = np.log(np.array([t.anchor_depth for t in problem.tracks]))
            if not np.all(np.isfinite(self.log_d)):
                raise NonPositiveDepth("anchor depths must be positive")
            self.anchors = np.unique(self.anchor_off)
            self.groups = [np.flatnonzero(self.anchor_off == a) for a in self.anchors]
        else:
            self.window_size = 0

    @property
    def n_params(self) -> int:
        return 6 * self.n_rel + 2 + self.n_tracks

    def snapshot(self):
        return self.rot.copy(), self.trans.copy(), self.log_f.copy(), (
            self.log_d.copy() if self.n_tracks else None
        )

    def restore(self, state) -> None:
        self.rot, self.trans, self.log_f, log_d = state
        if log_d is not None:
            self.log_d = log_d

    def apply_delta(self, delta: np.ndarray) -> None:
        step_r, step_t = batch_se3_exp(delta[: 6 * self.n_rel].reshape(-1, 6))
        self.trans = np.einsum("nij,nj->ni", step_r, self.trans) + step_t
        self.rot = step_r @ self.rot
        self.log_f = self.log_f + delta[6 * self.n_rel : 6 * self.n_rel + 2]
        if self.n_tracks:
            self.log_d = self.log_d + delta[6 * self.n_rel + 2 :]

    def reprojection(self, with_grad: bool = True):
        """Masked L1 reprojection error summed over tracks and window steps."""
        grad = np.zeros(self.n_params) if with_grad else None
        if self.n_tracks == 0:
            return 0.0, grad
        fx, fy = np.exp(self.log_f)
        depths = np.exp(self.log_d)
        vx = (self.anchor_px[:, 0] - self.cx) / fx
        vy = (self.anchor_px[:, 1] - self.cy) / fy
        x_anchor = np.stack([vx * depths, vy * depths, depths], axis=1)

        value = 0.0
        d_logf = np.zeros(2)
        ws = self.window_size
        for anchor, rows in zip(self.anchors, self.groups):
            # chain[k]: transform from the anchor camera to camera anchor + k
            chain_r = np.empty((ws, 3, 3))
            chain_t = np.empty((ws, 3))
            chain_r[0] = np.eye(3)
            chain_t[0] = 0.0
            for k in range(1, ws):
                chain_r[k] = self.rot[anchor + k - 1] @ chain_r[k - 1]
                chain_t[k] = self.rot[anchor + k - 1] @ chain_t[k - 1] + self.trans[anchor + k - 1]

            xg = x_anchor[rows]
            # points in every window camera: (m, ws, 3)
            pts = (chain_r @ xg.T).transpose(2, 0, 1) + chain_t[None, :, :]
            w = self.weights[rows]
            active = w > 0.0
            active[:, 0] = False  # the anchor has no reprojection residual
            z = pts[:, :, 2]
            if np.any(z[active] <= 0.0):
                raise NonPositiveDepth(
                    f"track point behind camera (min z = {z[active].min()})"
                )
            z_safe = np.where(active, z, 1.0)
            rx = np.where(active, fx * pts[:, :, 0] / z_safe + self.cx - self.targets[rows, :, 0], 0.0)
            ry = np.where(active, fy * pts[:, :, 1] / z_safe + self.cy - self.targets[rows, :, 1], 0.0)
            value += float(np.sum(w * (np.abs(rx) + np.abs(ry))))
            if not with_grad:
                continue
            gx = w * np.sign(rx)
            gy = w * np.sign(ry)
            g = np.empty_like(pts)
            g[:, :, 0] = gx * fx / z_safe
            g[:, :, 1] = gy * fy / z_safe
            g[:, :, 2] = -(gx * fx * pts[:, :, 0] + gy * fy * pts[:, :, 1]) / z_safe**2
            g[~active] = 0.0
            d_logf[0] += float(np.sum(gx * fx * pts[:, :, 0] / z_safe))
            d_logf[1] += float(np.sum(gy * fy * pts[:, :, 1] / z_safe))
            # residual gradients rotated back into the anchor camera frame
            g_hat = (g.transpose(1, 0, 2) @ chain_r).transpose(1, 0, 2)
            # suffix[:, j] = sum of g_hat over window steps >= j
            suffix = np.cumsum(g_hat[:, ::-1], axis=1)[:, ::-1]
            total = suffix[:, 1]
            grad[6 * self.n_rel + 2 + rows] = (total * xg).sum(axis=1)
            d_logf[0] -= float(np.sum(total[:, 0] * xg[:, 0]))
            d_logf[1] -= float(np.sum(total[:, 1] * xg[:, 1]))
            # per relative pose j: translation part chain_r[j+1] @ suffix[j+1],
            # rotation part pts[j+1] x (that), summed over the group's tracks
            h = (suffix[:, 1:].transpose(1, 0, 2) @ chain_r[1:].transpose(0, 2, 1)).transpose(1, 0, 2)
            omega = _cross_batched(pts[:, 1:], h)
            pose_grad = grad[: 6 * self.n_rel].reshape(self.n_rel, 6)
            pose_grad[anchor : anchor + ws - 1, :3] += omega.sum(axis=0)
            pose_grad[anchor : anchor + ws - 1, 3:] += h.sum(axis=0)
        if with_grad:
            grad[6 * self.n_rel : 6 * self.n_rel + 2] += d_logf
        return value, grad

    def smoothness(self, with_grad: bool = True):
        """Entry-wise L1 deviation of consecutive relative motions from identity."""
        if self.n_rel < 2:
            return 0.0, (np.zeros(6 * self.n_rel) if with_grad else None)
        ra = self.rot[:-1]
        ta = self.trans[:-1]
        rb = self.rot[1:]
        tb = self.trans[1:]
        ra_t = ra.transpose(0, 2, 1)
        d_rot = ra_t @ rb - np.eye(3)
        d_trans = np.einsum("nij,nj->ni", ra_t, tb - ta)
        value = float(np.abs(d_rot).sum() + np.abs(d_trans).sum())
        if not with_grad:
            return value, None
        s_rot = np.sign(d_rot)
        s_trans = np.sign(d_trans)
        # W = (A^-1)^T S B^T restricted to the blocks the tangent sees
        w_rot = ra @ (s_rot @ rb.transpose(0, 2, 1) + s_trans[:, :, None] * tb[:, None, :])
        w_trans = np.einsum("nij,nj->ni", ra, s_trans)
        v = np.empty((self.n_rel - 1, 6))
        v[:, 0] = w_rot[:, 2, 1] - w_rot[:, 1, 2]
        v[:, 1] = w_rot[:, 0, 2] - w_rot[:, 2, 0]
        v[:, 2] = w_rot[:, 1, 0] - w_rot[:, 0, 1]
        v[:, 3:] = w_trans
        grad = np.zeros((self.n_rel, 6))
        grad[1:] += v
        grad[:-1] -= v
        return value, grad.ravel()

    def objective(self, lambda_smooth: float, with_grad: bool = True):
        repr_value, repr_grad = self.reprojection(with_grad)
        smooth_value, smooth_grad = self.smoothness(with_grad)
        value = repr_value + lambda_smooth * smooth_value
        if not with_grad:
            return value, None
        grad = repr_grad
        grad[: 6 * self.n_rel] += lambda_smooth * smooth_grad
        return value, grad

    def to_problem(self, template: WindowProblem) -> WindowProblem:
        rel = [PoseSE3(self.rot[k].copy(), self.trans[k].copy()) for k in range(self.n_rel)]
        fx, fy = np.exp(self.log_f)
        intr = Intrinsics(float(fx), float(fy), self.cx, self.cy)
        tracks = [
            replace(t, anchor_depth=float(np.exp(self.log_d[i])))
            for i, t in enumerate(template.tracks)
        ]
        return WindowProblem(template.first_frame, rel, intr, tracks)


def reprojection_loss(problem: WindowProblem) -> LossEvaluation:
    """Masked reprojection objective with its analytic gradient.

    Gradient layout: pose tangents, then (log fx, log fy), then log depths.
    A point with mask weight 0 contributes exactly nothing to either output.
    """
    value, grad = _Evaluator(problem).reprojection()
    return LossEvaluation(value, grad)


def smoothness_loss(rel_poses: list[PoseSE3]) -> LossEvaluation:
    """Constant-velocity prior: sum of ||rel[t]^-1 rel[t+1] - I||_1 over triples."""
    probe = WindowProblem(0, list(rel_poses), Intrinsics(1.0, 1.0, 0.0, 0.0), [])
    value, grad = _Evaluator(probe).smoothness()
    return LossEvaluation(value, grad)


def ba_objective(problem: WindowProblem, lambda_smooth: float = 0.1) -> LossEvaluation:
    """Combined objective: reprojection plus weighted smoothness."""
    value, grad = _Evaluator(problem).objective(lambda_smooth)
    return LossEvaluation(value, grad)


def optimize_window(
    problem: WindowProblem,
    lambda_smooth: float = 0.1,
    steps: int = 400,
    learning_rate: float = 1e-3,
    final_lr_fraction: float = 0.01,
) -> WindowResult:
    """Minimize the window objective; returns the best parameters seen.

    The recorded trace is the best-so-far objective, hence non-increasing, and
    the final objective never exceeds the initial one.
    """
    ev = _Evaluator(problem)
    opt = MomentOptimizer(ev.n_params, learning_rate, total_steps=steps,
                          final_lr_fraction=final_lr_fraction)
    value, grad = ev.objective(lambda_smooth)
    check_finite_objective(value, "bundle adjustment")
    best_value = value
    best_state = ev.snapshot()
    trace = np.empty(steps + 1)
    trace[0] = best_value
    for step in range(steps):
        ev.apply_delta(-opt.step(grad))
        value, grad = ev.objective(lambda_smooth)
        check_finite_objective(value, f"bundle adjustment step {step}")
        if value < best_value:
            best_value = value
            best_state = ev.snapshot()
        trace[step + 1] = best_value
    ev.restore(best_state)
    return WindowResult(ev.to_problem(problem), trace)


def refine_sequence(
    frames: list[FrameBundle],
    masks: DynamicMaskSequence | None,
    intrinsics: Intrinsics,
    initial_poses: list[PoseSE3] | None = None,
    lambda_smooth: float = 0.1,
    window_steps: int = 400,
    global_steps: int = 5000,
    window_size: int = 8,
    grid_size: int = 16,
    learning_rate: float = 1e-3,
    final_lr_fraction: float = 0.01,
) -> RefineResult:
    """Two-stage pose refinement: stride-1 sliding windows, then a joint stage.

    Each window reuses the previous window's refined transforms for its
    overlapping frames and extrapolates the newly entered frame at constant
    velocity. The global stage re-optimizes every relative pose together with
    all static anchor points (tracks whose mask weights are all 1) under the
    same objective, with the smoothness prior over every consecutive triple.
    """
    t_total = len(frames)
    if t_total < window_size:
        raise WindowTooShort(f"need at least {window_size} frames, got {t_total}")
    if initial_poses is not None:
        if len(initial_poses) != t_total:
            raise ValueError(f"got {len(initial_poses)} poses for {t_total} frames")
        rel = [relative_pose(initial_poses[t], initial_poses[t + 1]) for t in range(t_total - 1)]
    else:
        rel = [PoseSE3.identity() for _ in range(t_total - 1)]
    intr = intrinsics

    window_traces = []
    all_tracks: list[PointTrack] = []
    n_windows = t_total - window_size + 1
    for w in range(n_windows):
        tracks = chain_tracks(frames[w : w + window_size], masks, grid_size, window_size)
        if w > 0:
            # newly entered relative pose: constant-velocity extrapolation
            rel[w + window_size - 2] = rel[w + window_size - 3].copy()
        problem = WindowProblem(w, [rel[w + k] for k in range(window_size - 1)], intr, tracks)
        result = optimize_window(problem, lambda_smooth, window_steps, learning_rate,
                                 final_lr_fraction)
        for k in range(window_size - 1):
            rel[w + k] = result.problem.rel_poses[k]
        intr = result.problem.intrinsics
        all_tracks.extend(result.problem.tracks)
        window_traces.append(result.objective_trace)

    static_tracks = [t for t in all_tracks if t.is_static()]
    global_problem = WindowProblem(0, rel, intr, static_tracks)
    global_result = optimize_window(global_problem, lambda_smooth, global_steps,
                                    learning_rate, final_lr_fraction)
    rel = global_result.problem.rel_poses
    intr = global_result.problem.intrinsics

    refined_by_id = {id(t): t for t in zip(static_tracks, global_result.problem.tracks)}
    refined_tracks = [refined_by_id.get(id(t), (None, t))[1] for t in all_tracks]

    poses = [initial_poses[0].copy() if initial_poses is not None else PoseSE3.identity()]
    for t in range(t_total - 1):
        poses.append(poses[-1].compose(rel[t].invert()))
    return RefineResult(poses, intr, refined_tracks, window_traces,
                        global_result.objective_trace)


class BundleAdjuster(BaseEstimator):
    """Scikit-learn style wrapper around :func:`refine_sequence`.

    Parameters mirror the pipeline hyperparameters; ``fit`` consumes a list of
    frames plus optional masks and pose initializations, and exposes the
    refined state as fitted attributes.
    """

    def __init__(
        self,
        lambda_smooth: float = 0.1,
        window_steps: int = 400,
        global_steps: int = 5000,
        window_size: int = 8,
        grid_size: int = 16,
        learning_rate: float = 1e-3,
        final_lr_fraction: float = 0.01,
        use_mask: bool = True,
    ):
        self.lambda_smooth = lambda_smooth
        self.window_steps = window_steps
        self.global_steps = global_steps
        self.window_size = window_size
        self.grid_size = grid_size
        self.learning_rate = learning_rate
        self.final_lr_fraction = final_lr_fraction
        self.use_mask = use_mask

    def fit(self, frames, masks=None, intrinsics=None, initial_poses=None):
        if intrinsics is None:
            raise ValueError("intrinsics are required")
        result = refine_sequence(
            frames,
            masks if self.use_mask else None,
            intrinsics,
            initial_poses,
            lambda_smooth=self.lambda_smooth,
            window_steps=self.window_steps,
            global_steps=self.global_steps,
            window_size=self.window_size,
            grid_size=self.grid_size,
            learning_rate=self.learning_rate,
            final_lr_fraction=self.final_lr_fraction,
        )
        self.poses_ = result.poses
        self.intrinsics_ = result.intrinsics
        self.tracks_ = result.tracks
        self.window_traces_ = result.window_traces
        self.global_trace_ = result.global_trace
        return self
