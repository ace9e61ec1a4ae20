"""Synthetic dynamic-scene oracle with exact depth, flow, masks, and tracks.

Scenes are planes and axis-aligned boxes rendered by analytic ray casting
(nearest intersection wins), with rigidly moving boxes as dynamic objects.
Flows are exact material-point displacements, so a static pixel's flow equals
the reprojection displacement induced by camera motion, and instance masks
exactly cover mover projections. Noise is applied on top of clean ground
truth and is seed-deterministic; sigma = 0 returns the clean data bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import NonPositiveDepth, SpecValidationError
from .geometry import Intrinsics, PoseSE3
from .masks import InstanceMaskSequence, write_instance_masks
from .sceneio import (
    FrameBundle,
    FrameFiles,
    PixelTrack,
    SequenceManifest,
    write_manifest,
    write_poses,
    write_raster,
    write_tracks,
)

_RAY_EPS = 1e-9


@dataclass(frozen=True)
class CameraPath:
    """Parametric camera trajectory: 'static', 'linear', or 'arc'."""

    kind: str = "static"
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.0
    omega: float = 0.0

    def pose(self, t: float) -> PoseSE3:
        if self.kind == "static":
            return PoseSE3.identity()
        if self.kind == "linear":
            return PoseSE3(np.eye(3), t * np.asarray(self.velocity, dtype=float))
        if self.kind == "arc":
            angle = self.omega * t
            c, s = math.cos(angle), math.sin(angle)
            rotation = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
            position = self.radius * np.array([c - 1.0, 0.0, s])
            return PoseSE3(rotation, position)
        raise SpecValidationError(f"unknown camera path kind {self.kind!r}")


@dataclass(frozen=True)
class Plane:
    """Infinite plane n . x = c."""

    normal: tuple[float, float, float]
    offset: float


@dataclass(frozen=True)
class Box:
    """Axis-aligned box given by center and full extents."""

    center: tuple[float, float, float]
    size: tuple[float, float, float]


@dataclass(frozen=True)
class Mover:
    """Rigidly moving box: linear velocity or a circular orbit in xz."""

    box: Box
    kind: str = "linear"
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 0.0
    omega: float = 0.0

    def displacement(self, t: float) -> np.ndarray:
        if self.kind == "linear":
            return t * np.asarray(self.velocity, dtype=float)
        if self.kind == "circular":
            angle = self.omega * t
            return self.radius * np.array([math.sin(angle), 0.0, 1.0 - math.cos(angle)])
        raise SpecValidationError(f"unknown mover kind {self.kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    depth_sigma: float = 0.0  # multiplicative log-normal on depth and track depths
    flow_sigma: float = 0.0  # additive gaussian per flow component (pixels)
    pose_sigma: float = 0.0  # RMS tangent-norm of the pose perturbation


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic description of a synthetic scene."""

    frame_count: int = 12
    width: int = 64
    height: int = 48
    focal: float = 60.0
    camera: CameraPath = field(default_factory=CameraPath)
    planes: tuple[Plane, ...] = (Plane((0.0, 0.0, -1.0), -6.0),)
    boxes: tuple[Box, ...] = ()
    movers: tuple[Mover, ...] = ()
    noise: NoiseModel = field(default_factory=NoiseModel)
    seed: int = 0
    track_grid: int = 8

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0)

    def validate(self) -> None:
        if self.frame_count < 2:
            raise SpecValidationError(f"frame_count >= 2 required, got {self.frame_count}")
        if self.width < 4 or self.height < 4:
            raise SpecValidationError("resolution must be at least 4x4")
        if self.focal <= 0:
            raise SpecValidationError("focal length must be positive")
        if not self.planes:
            raise SpecValidationError("at least one plane is required to bound every ray")
        if min(self.noise.depth_sigma, self.noise.flow_sigma, self.noise.pose_sigma) < 0:
            raise SpecValidationError("noise sigmas must be non-negative")
        if self.track_grid < 1:
            raise SpecValidationError("track_grid must be >= 1")


@dataclass
class SyntheticScene:
    """Clean ground truth plus seed-deterministic noisy initializations."""

    spec: SceneSpec
    intrinsics: Intrinsics
    gt_poses: list[PoseSE3]
    gt_depths: list[np.ndarray]
    flows_forward: list[np.ndarray | None]
    flows_backward: list[np.ndarray | None]
    instance_masks: list[InstanceMaskSequence]
    gt_tracks: list[PixelTrack]
    noisy_poses: list[PoseSE3]
    noisy_depths: list[np.ndarray]
    noisy_flows_forward: list[np.ndarray | None]
    noisy_flows_backward: list[np.ndarray | None]
    noisy_tracks: list[PixelTrack]

    def frames(self, noisy: bool = True) -> list[FrameBundle]:
        depths = self.noisy_depths if noisy else self.gt_depths
        fwd = self.noisy_flows_forward if noisy else self.flows_forward
        bwd = self.noisy_flows_backward if noisy else self.flows_backward
        return [
            FrameBundle(t, self.spec.width, self.spec.height, depths[t], fwd[t], bwd[t])
            for t in range(self.spec.frame_count)
        ]


def _plane_hits(plane: Plane, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    normal = np.asarray(plane.normal, dtype=float)
    denom = directions @ normal
    num = plane.offset - origins @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(np.abs(denom) > _RAY_EPS, num / denom, np.inf)
    return np.where(z > _RAY_EPS, z, np.inf)


def _box_hits(lo: np.ndarray, hi: np.ndarray, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / directions
        t2 = (hi - origins) / directions
    near = np.nanmax(np.minimum(t1, t2), axis=1)
    far = np.nanmin(np.maximum(t1, t2), axis=1)
    hit = (far >= near) & (far > _RAY_EPS)
    return np.where(hit & (near > _RAY_EPS), near, np.inf)


def _render(spec: SceneSpec, t: int, pose: PoseSE3):
    """Cast one ray per pixel; returns camera-z depth, hit id, world points.

    Hit ids: planes first, then static boxes, then movers.
    """
    h, w = spec.height, spec.width
    intr = spec.intrinsics()
    xs, ys = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    rays_cam = np.stack(
        [(xs.ravel() - intr.cx) / intr.fx, (ys.ravel() - intr.cy) / intr.fy, np.ones(h * w)],
        axis=1,
    )
    directions = rays_cam @ pose.rotation.T  # z-normalized: ray parameter == camera depth
    origins = np.broadcast_to(pose.translation, directions.shape)

    candidates = []
    for plane in spec.planes:
        candidates.append(_plane_hits(plane, origins, directions))
    for box in spec.boxes:
        center = np.asarray(box.center, dtype=float)
        half = np.asarray(box.size, dtype=float) / 2.0
        candidates.append(_box_hits(center - half, center + half, origins, directions))
    for mover in spec.movers:
        center = np.asarray(mover.box.center, dtype=float) + mover.displacement(t)
        half = np.asarray(mover.box.size, dtype=float) / 2.0
        candidates.append(_box_hits(center - half, center + half, origins, directions))
    depth_all = np.stack(candidates)
    hit = np.argmin(depth_all, axis=0)
    depth = depth_all[hit, np.arange(h * w)]
    if not np.all(np.isfinite(depth)):
        raise SpecValidationError("some rays miss all geometry; add a bounding plane")
    world = origins + depth[:, None] * directions
    return depth.reshape(h, w), hit.reshape(h, w), world.reshape(h, w, 3)


def _material_displacement(spec: SceneSpec, hit: np.ndarray, t_from: int, t_to: int) -> np.ndarray:
    """Per-pixel world displacement of the hit surface between two frames."""
    disp = np.zeros(hit.shape + (3,))
    n_static = len(spec.planes) + len(spec.boxes)
    for k, mover in enumerate(spec.movers):
        on_mover = hit == n_static + k
        if on_mover.any():
            disp[on_mover] = mover.displacement(t_to) - mover.displacement(t_from)
    return disp


def _project_into(pose: PoseSE3, intr: Intrinsics, world: np.ndarray) -> np.ndarray:
    cam = pose.invert()
    pts = world.reshape(-1, 3) @ cam.rotation.T + cam.translation
    z = pts[:, 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth("scene geometry projects behind the camera")
    proj = np.stack([intr.fx * pts[:, 0] / z + intr.cx, intr.fy * pts[:, 1] / z + intr.cy], axis=1)
    return proj.reshape(world.shape[:-1] + (2,))


def _pixel_centers(spec: SceneSpec) -> np.ndarray:
    xs, ys = np.meshgrid(np.arange(spec.width, dtype=float), np.arange(spec.height, dtype=float))
    return np.stack([xs, ys], axis=-1)


def _chain_ground_truth_tracks(spec: SceneSpec, poses, depths, hits, worlds) -> list[PixelTrack]:
    """Sample a coarse grid on frame 0 and follow each material point."""
    intr = spec.intrinsics()
    n_static = len(spec.planes) + len(spec.boxes)
    g = spec.track_grid
    gx = np.rint((np.arange(g) + 0.5) * spec.width / g - 0.5).astype(int)
    gy = np.rint((np.arange(g) + 0.5) * spec.height / g - 0.5).astype(int)
    tracks = []
    track_id = 0
    for row in gy:
        for col in gx:
            hit0 = int(hits[0][row, col])
            base_point = worlds[0][row, col]
            mover_idx = hit0 - n_static if hit0 >= n_static else None
            frames, pixels, track_depths = [], [], []
            for t in range(spec.frame_count):
                point = base_point.copy()
                if mover_idx is not None:
                    mover = spec.movers[mover_idx]
                    point = point + mover.displacement(t) - mover.displacement(0)
                cam = poses[t].invert()
                local = cam.rotation @ point + cam.translation
                if local[2] <= 0.0:
                    break
                px = intr.fx * local[0] / local[2] + intr.cx
                py = intr.fy * local[1] / local[2] + intr.cy
                if not (0.0 <= px <= spec.width - 1.0 and 0.0 <= py <= spec.height - 1.0):
                    break
                rendered = depths[t][int(round(py)), int(round(px))]
                if abs(rendered - local[2]) > 0.05 * local[2]:
                    break  # occluded by nearer geometry
                frames.append(t)
                pixels.append((px, py))
                track_depths.append(local[2])
            if len(frames) >= 2:
                label = "dynamic" if mover_idx is not None else "static"
                tracks.append(
                    PixelTrack(
                        track_id,
                        np.array(frames, dtype=int),
                        np.array(pixels, dtype=float),
                        np.array(track_depths, dtype=float),
                        label,
                    )
                )
                track_id += 1
    return tracks


def perturb_pose(pose: PoseSE3, sigma: float, rng: np.random.Generator) -> PoseSE3:
    """Left-compose a random tangent with RMS norm ``sigma``; 0 is identity."""
    if sigma == 0.0:
        return pose.copy()
    tangent = sigma / math.sqrt(6.0) * rng.standard_normal(6)
    return pose.perturbed(tangent)


def perturb_depth(depth: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return depth.copy()
    return depth * np.exp(sigma * rng.standard_normal(depth.shape))


def perturb_flow(flow: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0.0:
        return flow.copy()
    return flow + sigma * rng.standard_normal(flow.shape)


def _rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, index])


def perturb(scene: SyntheticScene, noise: NoiseModel, seed: int) -> SyntheticScene:
    """Re-derive the noisy initializations from clean ground truth."""
    noisy_poses = [
        perturb_pose(p, noise.pose_sigma, _rng(seed, 0, t)) for t, p in enumerate(scene.gt_poses)
    ]
    noisy_depths = [
        perturb_depth(d, noise.depth_sigma, _rng(seed, 1, t))
        for t, d in enumerate(scene.gt_depths)
    ]
    noisy_fwd = [
        perturb_flow(f, noise.flow_sigma, _rng(seed, 2, t)) if f is not None else None
        for t, f in enumerate(scene.flows_forward)
    ]
    noisy_bwd = [
        perturb_flow(f, noise.flow_sigma, _rng(seed, 3, t)) if f is not None else None
        for t, f in enumerate(scene.flows_backward)
    ]
    noisy_tracks = [
        replace(
            track,
            depths=perturb_depth(track.depths, noise.depth_sigma, _rng(seed, 4, k)),
        )
        for k, track in enumerate(scene.gt_tracks)
    ]
    return replace(
        scene,
        noisy_poses=noisy_poses,
        noisy_depths=noisy_depths,
        noisy_flows_forward=noisy_fwd,
        noisy_flows_backward=noisy_bwd,
        noisy_tracks=noisy_tracks,
    )


def generate(spec: SceneSpec) -> SyntheticScene:
    """Render a scene's ground truth and derive its noisy initializations."""
    spec.validate()
    intr = spec.intrinsics()
    poses = [spec.camera.pose(t) for t in range(spec.frame_count)]
    depths, hits, worlds = [], [], []
    for t in range(spec.frame_count):
        depth, hit, world = _render(spec, t, poses[t])
        depths.append(depth)
        hits.append(hit)
        worlds.append(world)

    pixels = _pixel_centers(spec)
    flows_fwd: list[np.ndarray | None] = []
    flows_bwd: list[np.ndarray | None] = [None]
    for t in range(spec.frame_count - 1):
        moved = worlds[t] + _material_displacement(spec, hits[t], t, t + 1)
        flows_fwd.append(_project_into(poses[t + 1], intr, moved) - pixels)
    flows_fwd.append(None)
    for t in range(1, spec.frame_count):
        moved = worlds[t] + _material_displacement(spec, hits[t], t, t - 1)
        flows_bwd.append(_project_into(poses[t - 1], intr, moved) - pixels)

    n_static = len(spec.planes) + len(spec.boxes)
    instance_masks = []
    for k in range(len(spec.movers)):
        seq = np.stack([(hits[t] == n_static + k).astype(np.uint8) for t in range(spec.frame_count)])
        instance_masks.append(InstanceMaskSequence(k, seq))

    gt_tracks = _chain_ground_truth_tracks(spec, poses, depths, hits, worlds)

    scene = SyntheticScene(
        spec=spec,
        intrinsics=intr,
        gt_poses=poses,
        gt_depths=depths,
        flows_forward=flows_fwd,
        flows_backward=flows_bwd,
        instance_masks=instance_masks,
        gt_tracks=gt_tracks,
        noisy_poses=[],
        noisy_depths=[],
        noisy_flows_forward=[],
        noisy_flows_backward=[],
        noisy_tracks=[],
    )
    return perturb(scene, spec.noise, spec.seed)


def write_scene(scene: SyntheticScene, out_dir) -> Path:
    """Write manifest, rasters, masks, tracks, and clean ground truth."""
    out = Path(out_dir)
    frames_dir = out / "frames"
    gt_dir = out / "gt"
    frames_dir.mkdir(parents=True, exist_ok=True)
    gt_dir.mkdir(parents=True, exist_ok=True)
    spec = scene.spec
    refs = []
    for t in range(spec.frame_count):
        depth_name = f"frames/depth_{t:04d}.ras"
        write_raster(out / depth_name, scene.noisy_depths[t].astype(np.float32))
        flow_name = None
        if scene.noisy_flows_forward[t] is not None:
            flow_name = f"frames/flow_{t:04d}.ras"
            write_raster(out / flow_name, scene.noisy_flows_forward[t].astype(np.float32))
        bflow_name = None
        if scene.noisy_flows_backward[t] is not None:
            bflow_name = f"frames/bflow_{t:04d}.ras"
            write_raster(out / bflow_name, scene.noisy_flows_backward[t].astype(np.float32))
        refs.append(FrameFiles(depth_name, flow_name, bflow_name))
        write_raster(gt_dir / f"depth_{t:04d}.ras", scene.gt_depths[t].astype(np.float32))
    manifest = SequenceManifest(
        spec.frame_count, spec.width, spec.height, scene.intrinsics, refs,
        scene.noisy_poses, out,
    )
    write_manifest(out / "manifest.txt", manifest)
    write_instance_masks(out / "masks", scene.instance_masks)
    write_tracks(out / "tracks.txt", scene.noisy_tracks)
    write_poses(gt_dir / "poses.txt", scene.gt_poses, scene.intrinsics)
    write_tracks(gt_dir / "tracks.txt", scene.gt_tracks)
    return out / "manifest.txt"


_SPEC_KEYS = {
    "frame_count", "width", "height", "focal", "camera", "plane", "box", "mover",
    "noise_depth", "noise_flow", "noise_pose", "seed", "track_grid",
}


def parse_scene_spec(path) -> SceneSpec:
    """Parse the key-value scene dialect; unknown keys are rejected."""
    scalars: dict[str, float] = {}
    camera = CameraPath()
    planes: list[Plane] = []
    boxes: list[Box] = []
    movers: list[Mover] = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SpecValidationError(f"cannot read scene spec {path}: {exc}") from exc
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, *parts = line.split()
        if key not in _SPEC_KEYS:
            raise SpecValidationError(f"{path}:{line_no}: unknown key {key!r}")
        try:
            if key in ("frame_count", "width", "height", "seed", "track_grid"):
                scalars[key] = int(parts[0])
            elif key in ("focal", "noise_depth", "noise_flow", "noise_pose"):
                scalars[key] = float(parts[0])
            elif key == "camera":
                kind = parts[0]
                if kind == "static":
                    camera = CameraPath("static")
                elif kind == "linear":
                    camera = CameraPath("linear", velocity=tuple(float(v) for v in parts[1:4]))
                elif kind == "arc":
                    camera = CameraPath("arc", radius=float(parts[1]), omega=float(parts[2]))
                else:
                    raise SpecValidationError(f"{path}:{line_no}: unknown camera kind {kind!r}")
            elif key == "plane":
                nx, ny, nz, c = (float(v) for v in parts)
                norm = math.sqrt(nx * nx + ny * ny + nz * nz)
                if norm == 0.0:
                    raise SpecValidationError(f"{path}:{line_no}: zero plane normal")
                planes.append(Plane((nx / norm, ny / norm, nz / norm), c / norm))
            elif key == "box":
                cx, cy, cz, sx, sy, sz = (float(v) for v in parts)
                boxes.append(Box((cx, cy, cz), (sx, sy, sz)))
            elif key == "mover":
                cx, cy, cz, sx, sy, sz = (float(v) for v in parts[:6])
                kind = parts[6]
                box = Box((cx, cy, cz), (sx, sy, sz))
                if kind == "linear":
                    movers.append(Mover(box, "linear", velocity=tuple(float(v) for v in parts[7:10])))
                elif kind == "circular":
                    movers.append(Mover(box, "circular", radius=float(parts[7]), omega=float(parts[8])))
                else:
                    raise SpecValidationError(f"{path}:{line_no}: unknown mover kind {kind!r}")
        except (ValueError, IndexError) as exc:
            raise SpecValidationError(f"{path}:{line_no}: {exc}") from exc
    noise = NoiseModel(
        scalars.pop("noise_depth", 0.0),
        scalars.pop("noise_flow", 0.0),
        scalars.pop("noise_pose", 0.0),
    )
    spec = SceneSpec(
        frame_count=int(scalars.pop("frame_count", 12)),
        width=int(scalars.pop("width", 64)),
        height=int(scalars.pop("height", 48)),
        focal=float(scalars.pop("focal", 60.0)),
        camera=camera,
        planes=tuple(planes) if planes else SceneSpec().planes,
        boxes=tuple(boxes),
        movers=tuple(movers),
        noise=noise,
        seed=int(scalars.pop("seed", 0)),
        track_grid=int(scalars.pop("track_grid", 8)),
    )
    spec.validate()
    return spec
