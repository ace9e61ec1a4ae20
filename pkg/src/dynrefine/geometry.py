"""Pinhole projection, SE(3) pose algebra, and similarity alignment.

All functions operate on float64 arrays and are pure; poses map points as
``x_out = rotation @ x_in + translation``. Tangent vectors are 6-vectors
ordered (axis-angle, translation) and are connected to poses through the
SE(3) exponential/logarithm maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateConfiguration, NonPositiveDepth

# Below this rotation angle the closed-form exp/log coefficients are replaced
# by their Taylor expansions (accurate to ~1e-21 at the switch point).
_SMALL_ANGLE = 1e-5


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics: focal lengths and principal point, in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0.0 and self.fy > 0.0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (math.isfinite(self.cx) and math.isfinite(self.cy)):
            raise ValueError(f"principal point must be finite, got ({self.cx}, {self.cy})")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def resized(self, old_size: tuple[int, int], new_size: tuple[int, int]) -> "Intrinsics":
        """Intrinsics after resampling from (W, H) ``old_size`` to ``new_size``.

        Uses the pixel-center convention: pixel (i, j) covers [i-0.5, i+0.5].
        """
        sx = new_size[0] / old_size[0]
        sy = new_size[1] / old_size[1]
        return Intrinsics(
            self.fx * sx,
            self.fy * sy,
            (self.cx + 0.5) * sx - 0.5,
            (self.cy + 0.5) * sy - 0.5,
        )


def project(intrinsics: Intrinsics, x: np.ndarray) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixel coordinates (..., 2).

    Raises NonPositiveDepth if any z-coordinate is <= 0.
    """
    x = np.asarray(x, dtype=float)
    z = x[..., 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth(f"projection requires z > 0, min z = {np.min(z)}")
    return np.stack(
        [
            intrinsics.fx * x[..., 0] / z + intrinsics.cx,
            intrinsics.fy * x[..., 1] / z + intrinsics.cy,
        ],
        axis=-1,
    )


def unproject(intrinsics: Intrinsics, p: np.ndarray, d) -> np.ndarray:
    """Lift pixels (..., 2) with depths (...) to camera-frame points (..., 3).

    The returned z-coordinate equals ``d`` exactly, so
    ``project(K, unproject(K, p, d)) == p`` in exact arithmetic.
    """
    p = np.asarray(p, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(d <= 0.0):
        raise NonPositiveDepth(f"unprojection requires d > 0, min d = {np.min(d)}")
    return np.stack(
        [
            (p[..., 0] - intrinsics.cx) / intrinsics.fx * d,
            (p[..., 1] - intrinsics.cy) / intrinsics.fy * d,
            d * np.ones_like(p[..., 0]),
        ],
        axis=-1,
    )


def unprojection_rays(intrinsics: Intrinsics, p: np.ndarray) -> np.ndarray:
    """Unit-depth unprojection directions ((x-cx)/fx, (y-cy)/fy, 1)."""
    p = np.asarray(p, dtype=float)
    return np.stack(
        [
            (p[..., 0] - intrinsics.cx) / intrinsics.fx,
            (p[..., 1] - intrinsics.cy) / intrinsics.fy,
            np.ones_like(p[..., 0]),
        ],
        axis=-1,
    )


def cross3(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cross product over (..., 3) arrays (faster than np.cross)."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def skew(v: np.ndarray) -> np.ndarray:
    """3x3 cross-product matrix of a 3-vector."""
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def _so3_coefficients(theta: float) -> tuple[float, float, float]:
    # A = sin t / t, B = (1 - cos t) / t^2, C = (t - sin t) / t^3
    if theta < _SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0, 0.5 - t2 / 24.0, 1.0 / 6.0 - t2 / 120.0
    s, c = math.sin(theta), math.cos(theta)
    return s / theta, (1.0 - c) / (theta * theta), (theta - s) / theta**3


def batch_se3_exp(tangents: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """SE(3) exponential of (N, 6) tangents: rotations (N, 3, 3), translations (N, 3)."""
    tangents = np.asarray(tangents, dtype=float)
    omega = tangents[:, :3]
    rho = tangents[:, 3:]
    theta = np.linalg.norm(omega, axis=1)
    small = theta < _SMALL_ANGLE
    t2 = theta * theta
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / theta)
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / t2)
        c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (theta - np.sin(theta)) / theta**3)
    n = tangents.shape[0]
    w = np.zeros((n, 3, 3))
    w[:, 0, 1] = -omega[:, 2]
    w[:, 0, 2] = omega[:, 1]
    w[:, 1, 0] = omega[:, 2]
    w[:, 1, 2] = -omega[:, 0]
    w[:, 2, 0] = -omega[:, 1]
    w[:, 2, 1] = omega[:, 0]
    w2 = w @ w
    eye = np.broadcast_to(np.eye(3), (n, 3, 3))
    rotations = eye + a[:, None, None] * w + b[:, None, None] * w2
    v = eye + b[:, None, None] * w + c[:, None, None] * w2
    translations = np.einsum("nij,nj->ni", v, rho)
    return rotations, translations


@dataclass
class PoseSE3:
    """Rigid transform with a 3x3 orthonormal rotation and a 3-translation.

    The optimization parameter is the tangent 6-vector (axis-angle,
    translation twist) obtained from :meth:`log`; local steps are applied by
    left-composing ``PoseSE3.exp(delta)``.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls()

    @classmethod
    def exp(cls, tangent: np.ndarray) -> "PoseSE3":
        """SE(3) exponential of a tangent (omega, rho) 6-vector."""
        tangent = np.asarray(tangent, dtype=float)
        omega, rho = tangent[:3], tangent[3:]
        theta = float(np.linalg.norm(omega))
        w = skew(omega)
        w2 = w @ w
        a, b, c = _so3_coefficients(theta)
        rotation = np.eye(3) + a * w + b * w2
        v = np.eye(3) + b * w + c * w2
        return cls(rotation, v @ rho)

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, atol: float = 1e-6) -> "PoseSE3":
        """Build from a 4x4 (or 3x4) matrix, re-orthonormalizing the rotation.

        Inputs further than ``atol`` from orthonormal are rejected; closer ones
        are snapped to the nearest rotation so downstream invariants hold at
        machine precision.
        """
        matrix = np.asarray(matrix, dtype=float)
        r = matrix[:3, :3]
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > atol or np.linalg.det(r) < 0.0:
            raise ValueError(f"matrix rotation block is not orthonormal (error {err:.3e})")
        if err > 1e-12:
            u, _, vt = np.linalg.svd(r)
            r = u @ vt
            if np.linalg.det(r) < 0.0:
                u[:, -1] = -u[:, -1]
                r = u @ vt
        return cls(r, matrix[:3, 3].copy())

    def log(self) -> np.ndarray:
        """SE(3) logarithm: tangent 6-vector (axis-angle, translation twist)."""
        r = self.rotation
        cos_theta = min(1.0, max(-1.0, (np.trace(r) - 1.0) / 2.0))
        # vee(R - R^T) / 2 = sin(theta) * axis
        sin_axis = 0.5 * np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
        sin_theta = float(np.linalg.norm(sin_axis))
        theta = math.atan2(sin_theta, cos_theta)
        if theta < _SMALL_ANGLE:
            t2 = theta * theta
            omega = (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0) * sin_axis
        else:
            omega = (theta / sin_theta) * sin_axis
        w = skew(omega)
        w2 = w @ w
        if theta < _SMALL_ANGLE:
            d = 1.0 / 12.0 + theta * theta / 720.0
        else:
            a, b, _ = _so3_coefficients(theta)
            d = (1.0 - a / (2.0 * b)) / (theta * theta)
        v_inv = np.eye(3) - 0.5 * w + d * w2
        return np.concatenate([omega, v_inv @ self.translation])

    @property
    def tangent(self) -> np.ndarray:
        return self.log()

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """Transform applying ``other`` first, then ``self``."""
        return PoseSE3(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def invert(self) -> "PoseSE3":
        rt = self.rotation.T
        return PoseSE3(rt, -(rt @ self.translation))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Apply to points of shape (..., 3)."""
        x = np.asarray(x, dtype=float)
        return x @ self.rotation.T + self.translation

    def perturbed(self, delta: np.ndarray) -> "PoseSE3":
        """Left-compose the exponential of a local tangent step."""
        return PoseSE3.exp(delta).compose(self)

    def copy(self) -> "PoseSE3":
        return PoseSE3(self.rotation.copy(), self.translation.copy())


def relative_pose(pose_from: PoseSE3, pose_to: PoseSE3) -> PoseSE3:
    """Transform taking camera-``from`` coordinates to camera-``to`` coordinates.

    Both arguments are camera-to-world poses.
    """
    return pose_to.invert().compose(pose_from)


def rotation_angle(rotation: np.ndarray) -> float:
    """Rotation angle in radians, accurate for angles near zero."""
    cos_theta = min(1.0, max(-1.0, (np.trace(rotation) - 1.0) / 2.0))
    sin_axis = 0.5 * np.array(
        [
            rotation[2, 1] - rotation[1, 2],
            rotation[0, 2] - rotation[2, 0],
            rotation[1, 0] - rotation[0, 1],
        ]
    )
    return math.atan2(float(np.linalg.norm(sin_axis)), cos_theta)


@dataclass(frozen=True)
class SimilarityTransform:
    """Similarity s, R, t mapping points as ``s * R @ x + t``."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return self.scale * points @ self.rotation.T + self.translation


def umeyama_align(estimated: np.ndarray, reference: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity aligning ``estimated`` points onto ``reference``.

    Solves min over (s, R, t) of mean ||s R x_i + t - y_i||^2 in closed form
    via the SVD of the cross-covariance. Requires >= 3 non-collinear points;
    collinear or coincident configurations raise DegenerateConfiguration.
    """
    x = np.asarray(estimated, dtype=float)
    y = np.asarray(reference, dtype=float)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"expected matching (N, 3) arrays, got {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 3:
        raise ValueError(f"need at least 3 point pairs, got {n}")

    mu_x = x.mean(axis=0)
    mu_y = y.mean(axis=0)
    xc = x - mu_x
    yc = y - mu_y
    cov = yc.T @ xc / n
    u, d, vt = np.linalg.svd(cov)
    if d[0] <= 0.0 or d[1] <= 1e-12 * d[0]:
        raise DegenerateConfiguration(
            "cross-covariance is rank-deficient; points are collinear or coincident"
        )
    s_mat = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s_mat[2, 2] = -1.0
    rotation = u @ s_mat @ vt
    var_x = float((xc**2).sum() / n)
    scale = float(np.trace(np.diag(d) @ s_mat) / var_x)
    if scale <= 0.0:
        raise DegenerateConfiguration(f"recovered non-positive scale {scale}")
    translation = mu_y - scale * rotation @ mu_x
    return SimilarityTransform(scale, rotation, translation)
