"""Bit-exact persistence of depth, flow, masks, poses, and point tracks.

Rasters use a fixed 32-byte little-endian header (magic, version, dtype code,
channels, height, width) followed by row-major sample data: float32 for depth
and flow, uint8 for masks. Manifests, pose files, and track files are
line-oriented key-value text; floats are written with shortest round-trip
repr so read-back is bit-exact.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DimensionMismatch, IoError, ParseError, ValidationError
from .geometry import Intrinsics, PoseSE3
from .validation import check_depth, check_flow

RASTER_MAGIC = b"DRRS"
RASTER_VERSION = 1
_HEADER = struct.Struct("<4sBBBxII16x")
_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("u1")}
_CODE_FOR_KIND = {"float": 1, "mask": 2}


def _fmt(value: float) -> str:
    return repr(float(value))


def write_raster(path, array: np.ndarray) -> None:
    """Write a (H, W) or (H, W, C) array as float32 or uint8 raster."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValidationError(f"raster must be 2-D or 3-D, got shape {array.shape}")
    if array.dtype == np.uint8:
        code = _CODE_FOR_KIND["mask"]
        data = array
    else:
        if not np.all(np.isfinite(array)):
            raise ValidationError(f"raster for {path} contains non-finite values")
        code = _CODE_FOR_KIND["float"]
        data = array.astype("<f4")
    h, w, c = data.shape
    header = _HEADER.pack(RASTER_MAGIC, RASTER_VERSION, code, c, h, w)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(np.ascontiguousarray(data).tobytes())
    except OSError as exc:
        raise IoError(f"failed to write raster {path}: {exc}") from exc


def read_raster(path) -> np.ndarray:
    """Read a raster; returns (H, W) for single-channel data, else (H, W, C)."""
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot open raster: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise ParseError(path, len(blob), "truncated raster header")
    magic, version, code, channels, h, w = _HEADER.unpack_from(blob)
    if magic != RASTER_MAGIC:
        raise ParseError(path, 0, f"bad magic {magic!r}")
    if version != RASTER_VERSION:
        raise ParseError(path, 4, f"unsupported raster version {version}")
    if code not in _DTYPE_CODES:
        raise ParseError(path, 5, f"unknown dtype code {code}")
    dtype = _DTYPE_CODES[code]
    expected = h * w * channels * dtype.itemsize
    payload = blob[_HEADER.size :]
    if len(payload) != expected:
        raise ParseError(
            path,
            _HEADER.size + len(payload),
            f"raster payload has {len(payload)} bytes, expected {expected}",
        )
    array = np.frombuffer(payload, dtype=dtype).reshape(h, w, channels)
    if channels == 1:
        array = array[:, :, 0]
    return array.copy()


@dataclass
class FrameBundle:
    """Per-frame optimization inputs at a shared resolution.

    ``flow_forward`` holds pixel displacements to frame ``index + 1`` and is
    absent on the last frame; ``flow_backward`` (displacements to frame
    ``index - 1``) is optional and absent on the first frame. ``mask`` is
    attached by the pipelines once instance masks have been merged.
    """

    index: int
    width: int
    height: int
    depth: np.ndarray
    flow_forward: np.ndarray | None = None
    flow_backward: np.ndarray | None = None
    mask: np.ndarray | None = None


@dataclass
class FrameFiles:
    depth: str
    flow: str | None
    backward_flow: str | None


@dataclass
class SequenceManifest:
    """Parsed manifest: sequence geometry plus per-frame file references."""

    frame_count: int
    width: int
    height: int
    intrinsics: Intrinsics
    frames: list[FrameFiles]
    poses: list[PoseSE3] | None = None
    base_dir: Path = field(default_factory=Path)

    def frame_path(self, name: str) -> Path:
        return self.base_dir / name


def _lines_with_offsets(path) -> list[tuple[int, str]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot open: {exc}") from exc
    out = []
    offset = 0
    for raw in blob.split(b"\n"):
        try:
            text = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError(path, offset, "not valid UTF-8") from exc
        out.append((offset, text))
        offset += len(raw) + 1
    return out


def _parse_floats(path, offset, parts, n, what):
    if len(parts) != n:
        raise ParseError(path, offset, f"{what}: expected {n} values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise ParseError(path, offset, f"{what}: {exc}") from exc


_MANIFEST_KEYS = {"frame_count", "width", "height", "intrinsics", "pose", "frame"}


def read_manifest(path) -> SequenceManifest:
    """Parse a sequence manifest; rejects unknown keys and malformed lines."""
    path = Path(path)
    header: dict[str, int] = {}
    intrinsics = None
    poses: dict[int, PoseSE3] = {}
    frames: dict[int, FrameFiles] = {}
    for offset, line in _lines_with_offsets(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, *parts = line.split()
        if key not in _MANIFEST_KEYS:
            raise ParseError(path, offset, f"unknown manifest key {key!r}")
        if key in ("frame_count", "width", "height"):
            if len(parts) != 1 or not parts[0].lstrip("-").isdigit():
                raise ParseError(path, offset, f"{key}: expected one integer")
            header[key] = int(parts[0])
        elif key == "intrinsics":
            fx, fy, cx, cy = _parse_floats(path, offset, parts, 4, "intrinsics")
            try:
                intrinsics = Intrinsics(fx, fy, cx, cy)
            except ValueError as exc:
                raise ParseError(path, offset, str(exc)) from exc
        elif key == "pose":
            values = _parse_floats(path, offset, parts, 17, "pose")
            idx = int(values[0])
            matrix = np.array(values[1:]).reshape(4, 4)
            try:
                poses[idx] = PoseSE3.from_matrix(matrix)
            except ValueError as exc:
                raise ParseError(path, offset, str(exc)) from exc
        elif key == "frame":
            if len(parts) != 4:
                raise ParseError(path, offset, "frame: expected index and 3 paths ('-' if absent)")
            idx = int(parts[0])
            if idx in frames:
                raise ParseError(path, offset, f"duplicate frame {idx}")
            frames[idx] = FrameFiles(
                depth=parts[1],
                flow=None if parts[2] == "-" else parts[2],
                backward_flow=None if parts[3] == "-" else parts[3],
            )

    for key in ("frame_count", "width", "height"):
        if key not in header:
            raise ParseError(path, 0, f"missing manifest key {key!r}")
    if intrinsics is None:
        raise ParseError(path, 0, "missing manifest key 'intrinsics'")
    t = header["frame_count"]
    if t < 2:
        raise ParseError(path, 0, f"frame_count >= 2 required, got {t}")
    if sorted(frames) != list(range(t)):
        raise ParseError(path, 0, f"expected frames 0..{t - 1}, got {sorted(frames)}")
    frame_list = [frames[i] for i in range(t)]
    if frame_list[-1].flow is not None:
        raise ParseError(path, 0, "last frame must not reference a forward flow")
    for i in range(t - 1):
        if frame_list[i].flow is None:
            raise ParseError(path, 0, f"frame {i} is missing its forward flow")
    if frame_list[0].backward_flow is not None:
        raise ParseError(path, 0, "first frame must not reference a backward flow")
    pose_list = None
    if poses:
        if sorted(poses) != list(range(t)):
            raise ParseError(path, 0, "pose lines must cover frames 0..T-1 or be omitted")
        pose_list = [poses[i] for i in range(t)]
    base = path.parent
    for ref in frame_list:
        for name in (ref.depth, ref.flow, ref.backward_flow):
            if name is not None and not (base / name).is_file():
                raise ParseError(path, 0, f"referenced file does not exist: {name}")
    return SequenceManifest(t, header["width"], header["height"], intrinsics, frame_list, pose_list, base)


def _load_frame(manifest: SequenceManifest, index: int) -> FrameBundle:
    ref = manifest.frames[index]
    depth = read_raster(manifest.frame_path(ref.depth))
    if depth.ndim != 2:
        raise DimensionMismatch(f"frame {index}: depth must be single-channel")
    if depth.shape != (manifest.height, manifest.width):
        raise DimensionMismatch(
            f"frame {index}: depth shape {depth.shape} != manifest "
            f"({manifest.height}, {manifest.width})"
        )
    depth = check_depth(depth.astype(float), f"frame {index} depth")
    flows = []
    for name in (ref.flow, ref.backward_flow):
        if name is None:
            flows.append(None)
            continue
        flow = read_raster(manifest.frame_path(name))
        if flow.ndim != 3 or flow.shape != (manifest.height, manifest.width, 2):
            raise DimensionMismatch(f"frame {index}: flow shape {flow.shape} is invalid")
        flows.append(check_flow(flow.astype(float), f"frame {index} flow"))
    return FrameBundle(index, manifest.width, manifest.height, depth, flows[0], flows[1])


def read_sequence(manifest_path) -> tuple[SequenceManifest, Iterator[FrameBundle]]:
    """Parse a manifest and return it with a lazy frame iterator.

    Frames are loaded one at a time in temporal order, so memory use is
    bounded by a single frame regardless of sequence length.
    """
    manifest = read_manifest(manifest_path)

    def frames() -> Iterator[FrameBundle]:
        for index in range(manifest.frame_count):
            yield _load_frame(manifest, index)

    return manifest, frames()


def load_frames(manifest_path) -> tuple[SequenceManifest, list[FrameBundle]]:
    """Eagerly load every frame (convenience for the desk-scale pipelines)."""
    manifest, stream = read_sequence(manifest_path)
    return manifest, list(stream)


def write_manifest(path, manifest: SequenceManifest) -> None:
    lines = [
        f"frame_count {manifest.frame_count}",
        f"width {manifest.width}",
        f"height {manifest.height}",
        "intrinsics "
        + " ".join(_fmt(v) for v in (manifest.intrinsics.fx, manifest.intrinsics.fy,
                                     manifest.intrinsics.cx, manifest.intrinsics.cy)),
    ]
    if manifest.poses is not None:
        for i, pose in enumerate(manifest.poses):
            values = " ".join(_fmt(v) for v in pose.matrix().ravel())
            lines.append(f"pose {i} {values}")
    for i, ref in enumerate(manifest.frames):
        flow = ref.flow or "-"
        bflow = ref.backward_flow or "-"
        lines.append(f"frame {i} {ref.depth} {flow} {bflow}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_poses(path, poses: list[PoseSE3], intrinsics: Intrinsics | None = None) -> None:
    lines = []
    if intrinsics is not None:
        lines.append(
            "intrinsics "
            + " ".join(_fmt(v) for v in (intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy))
        )
    for i, pose in enumerate(poses):
        values = " ".join(_fmt(v) for v in pose.matrix().ravel())
        lines.append(f"pose {i} {values}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_poses(path) -> tuple[list[PoseSE3], Intrinsics | None]:
    poses: dict[int, PoseSE3] = {}
    intrinsics = None
    for offset, line in _lines_with_offsets(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, *parts = line.split()
        if key == "intrinsics":
            fx, fy, cx, cy = _parse_floats(path, offset, parts, 4, "intrinsics")
            intrinsics = Intrinsics(fx, fy, cx, cy)
        elif key == "pose":
            values = _parse_floats(path, offset, parts, 17, "pose")
            poses[int(values[0])] = PoseSE3.from_matrix(np.array(values[1:]).reshape(4, 4))
        else:
            raise ParseError(path, offset, f"unknown pose-file key {key!r}")
    if sorted(poses) != list(range(len(poses))):
        raise ParseError(path, 0, "pose indices must be contiguous from 0")
    return [poses[i] for i in range(len(poses))], intrinsics


@dataclass
class PixelTrack:
    """A chained 2-D track with per-point depths (scene units)."""

    track_id: int
    frames: np.ndarray
    points: np.ndarray
    depths: np.ndarray
    label: str | None = None


def write_tracks(path, tracks: list[PixelTrack]) -> None:
    lines = []
    for track in tracks:
        n = len(track.frames)
        head = f"track {track.track_id} {n}"
        if track.label:
            head += f" {track.label}"
        lines.append(head)
        for k in range(n):
            lines.append(
                f"point {int(track.frames[k])} {_fmt(track.points[k, 0])} "
                f"{_fmt(track.points[k, 1])} {_fmt(track.depths[k])}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def read_tracks(path) -> list[PixelTrack]:
    tracks: list[PixelTrack] = []
    current: dict | None = None

    def finish():
        if current is None:
            return
        if len(current["frames"]) != current["n"]:
            raise ParseError(
                path, current["offset"],
                f"track {current['id']}: expected {current['n']} points, got {len(current['frames'])}",
            )
        tracks.append(
            PixelTrack(
                current["id"],
                np.array(current["frames"], dtype=int),
                np.array(current["points"], dtype=float),
                np.array(current["depths"], dtype=float),
                current["label"],
            )
        )

    for offset, line in _lines_with_offsets(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, *parts = line.split()
        if key == "track":
            finish()
            if len(parts) not in (2, 3):
                raise ParseError(path, offset, "track: expected id, length[, label]")
            current = {
                "id": int(parts[0]),
                "n": int(parts[1]),
                "label": parts[2] if len(parts) == 3 else None,
                "frames": [],
                "points": [],
                "depths": [],
                "offset": offset,
            }
        elif key == "point":
            if current is None:
                raise ParseError(path, offset, "point line before any track line")
            values = _parse_floats(path, offset, parts, 4, "point")
            current["frames"].append(int(values[0]))
            current["points"].append(values[1:3])
            current["depths"].append(values[3])
        else:
            raise ParseError(path, offset, f"unknown track-file key {key!r}")
    finish()
    return tracks


def write_outputs(
    poses: list[PoseSE3] | None,
    depths: list[np.ndarray] | None,
    tracks: list[PixelTrack] | None,
    destination,
    intrinsics: Intrinsics | None = None,
) -> None:
    """Persist refined poses, depth maps, and tracks under ``destination``.

    Writing is deterministic: re-writing identical data produces byte-identical
    files. Non-finite depth values are rejected before anything is written.
    """
    if poses is not None and depths is not None and len(poses) != len(depths):
        raise ValidationError(
            f"got {len(poses)} poses but {len(depths)} depth maps"
        )
    if depths is not None:
        for i, depth in enumerate(depths):
            check_depth(depth, f"output depth {i}")
    destination = Path(destination)
    try:
        destination.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {destination}: {exc}") from exc
    if poses is not None:
        write_poses(destination / "poses.txt", poses, intrinsics)
    if depths is not None:
        for i, depth in enumerate(depths):
            write_raster(destination / f"depth_{i:04d}.ras", np.asarray(depth, dtype=np.float32))
    if tracks is not None:
        write_tracks(destination / "tracks.txt", tracks)


def read_depth_dir(directory) -> list[np.ndarray]:
    """Read all depth_*.ras rasters of a directory in index order."""
    directory = Path(directory)
    names = sorted(p.name for p in directory.glob("depth_*.ras"))
    if not names:
        raise ParseError(directory, 0, "no depth_*.ras rasters found")
    return [read_raster(directory / n).astype(float) for n in names]
