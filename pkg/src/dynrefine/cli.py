"""Command line entry point: synth, ba, cvd, track4d, eval, and pipeline.

Every run echoes its full configuration (defaults included) into a
line-oriented key-value report next to its artifacts. Exit codes: 0 success,
2 validation/usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import metrics as metrics_mod
from .ba import BundleAdjuster
from .cvd import DepthOptimizer
from .errors import (
    DynRefineError,
    ParseError,
    SpecValidationError,
    ValidationError,
)
from .masks import DynamicMaskSequence, load_dynamic_masks, merge_masks, resample_nearest
from .sceneio import (
    load_frames,
    read_depth_dir,
    read_poses,
    read_raster,
    read_tracks,
    write_poses,
    write_raster,
    write_tracks,
)
from .synth import generate, parse_scene_spec, write_scene
from .track4d import TrackOptimizer

_VALIDATION_ERRORS = (
    ParseError,
    ValidationError,
    SpecValidationError,
    FileNotFoundError,
    ValueError,
)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_report(path, entries) -> None:
    lines = [f"{key} {_fmt(value)}" for key, value in entries]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _write_columns(path, header: str, rows) -> None:
    lines = [f"# {header}"]
    for row in rows:
        lines.append(" ".join(_fmt(v) for v in row))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _config_entries(args, keys) -> list:
    return [(f"config.{key}", getattr(args, key, None)) for key in keys]


def _parse_resolution(text: str):
    if text == "native":
        return None
    try:
        w, h = text.lower().split("x")
        return (int(w), int(h))
    except ValueError as exc:
        raise ValidationError(f"bad resolution {text!r}, expected WxH or 'native'") from exc


def _load_mask_sequence(masks_dir, manifest) -> DynamicMaskSequence:
    masks = load_dynamic_masks(masks_dir, manifest.frame_count)
    return resample_nearest(masks, (manifest.height, manifest.width))


def _require(path, what) -> Path:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{what} does not exist: {path}")
    return path


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args) -> int:
    spec = parse_scene_spec(_require(args.spec, "scene spec"))
    scene = generate(spec)
    manifest_path = write_scene(scene, args.out)
    write_report(
        Path(args.out) / "report.txt",
        _config_entries(args, ("spec", "out", "seed", "threads"))
        + [
            ("result.manifest", manifest_path.name),
            ("result.frame_count", spec.frame_count),
            ("result.movers", len(spec.movers)),
            ("result.tracks", len(scene.gt_tracks)),
        ],
    )
    return 0


_BA_KEYS = ("manifest", "masks", "out", "lambda_smooth", "window_steps", "global_steps",
            "window_size", "grid_size", "learning_rate", "no_mask", "seed", "threads")


def _run_ba(args, manifest, frames, masks):
    refiner = BundleAdjuster(
        lambda_smooth=args.lambda_smooth,
        window_steps=args.window_steps,
        global_steps=args.global_steps,
        window_size=args.window_size,
        grid_size=args.grid_size,
        learning_rate=args.learning_rate,
        use_mask=not args.no_mask,
    )
    refiner.fit(frames, masks, intrinsics=manifest.intrinsics, initial_poses=manifest.poses)
    return refiner


def _write_ba_outputs(out_dir, refiner, args) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_poses(out / "poses.txt", refiner.poses_, refiner.intrinsics_)
    anchor_lines = []
    for k, track in enumerate(refiner.tracks_):
        anchor_lines.append(
            (k, track.anchor_frame, track.points[0, 0], track.points[0, 1],
             track.anchor_depth, 1 if track.is_static() else 0)
        )
    _write_columns(out / "anchors.txt", "track anchor_frame x y depth static", anchor_lines)
    _write_columns(
        out / "trace_global.txt", "step objective",
        list(enumerate(refiner.global_trace_)),
    )
    window_rows = []
    for w, trace in enumerate(refiner.window_traces_):
        window_rows.extend((w, s, v) for s, v in enumerate(trace))
    _write_columns(out / "trace_windows.txt", "window step objective", window_rows)
    write_report(
        out / "report.txt",
        _config_entries(args, _BA_KEYS)
        + [
            ("result.final_objective", float(refiner.global_trace_[-1])),
            ("result.n_tracks", len(refiner.tracks_)),
            ("result.n_static_tracks", sum(t.is_static() for t in refiner.tracks_)),
            ("result.fx", refiner.intrinsics_.fx),
            ("result.fy", refiner.intrinsics_.fy),
        ],
    )


def _cmd_ba(args) -> int:
    manifest, frames = load_frames(_require(args.manifest, "manifest"))
    masks = None
    if not args.no_mask:
        if args.masks is None:
            raise ValidationError("--masks is required unless --no-mask is given")
        masks = _load_mask_sequence(_require(args.masks, "mask directory"), manifest)
    refiner = _run_ba(args, manifest, frames, masks)
    _write_ba_outputs(args.out, refiner, args)
    return 0


_CVD_KEYS = ("manifest", "masks", "poses", "out", "lambda_flow", "lambda_temp",
             "lambda_prior", "uncertainty", "steps", "learning_rate", "resolution",
             "seed", "threads")


def _run_cvd(args, manifest, frames, masks, poses, intrinsics):
    optimizer = DepthOptimizer(
        lambda_flow=args.lambda_flow,
        lambda_temp=args.lambda_temp,
        lambda_prior=args.lambda_prior,
        resolution=_parse_resolution(args.resolution),
        steps=args.steps,
        learning_rate=getattr(args, "learning_rate_cvd", args.learning_rate),
        uncertainty=args.uncertainty,
    )
    optimizer.fit(frames, masks, poses=poses, intrinsics=intrinsics)
    return optimizer


def _write_cvd_outputs(out_dir, optimizer, args) -> None:
    out = Path(out_dir)
    native = out / "native"
    native.mkdir(parents=True, exist_ok=True)
    solution = optimizer.solution_
    for t in range(solution.depths.shape[0]):
        write_raster(out / f"depth_{t:04d}.ras", solution.upsampled[t].astype(np.float32))
        write_raster(native / f"depth_{t:04d}.ras", solution.depths[t].astype(np.float32))
        write_raster(native / f"omega_{t:04d}.ras", solution.omega[t].astype(np.float32))
    _write_columns(out / "trace.txt", "step objective", list(enumerate(solution.objective_trace)))
    write_report(
        out / "report.txt",
        _config_entries(args, _CVD_KEYS)
        + [
            ("result.final_objective", solution.final_objective),
            ("result.final_objective_adjusted", solution.final_objective_adjusted),
            ("result.temporal_offset", solution.temporal_offset),
        ],
    )


def _cvd_poses(args, manifest):
    if args.poses is not None:
        poses, intr = read_poses(_require(args.poses, "poses file"))
        return poses, intr or manifest.intrinsics
    if manifest.poses is not None:
        return manifest.poses, manifest.intrinsics
    raise ValidationError("no poses: pass --poses or include pose lines in the manifest")


def _cmd_cvd(args) -> int:
    manifest, frames = load_frames(_require(args.manifest, "manifest"))
    poses, intrinsics = _cvd_poses(args, manifest)
    masks = None
    if args.uncertainty == "mask":
        if args.masks is None:
            raise ValidationError("--masks is required with --uncertainty mask")
        masks = _load_mask_sequence(_require(args.masks, "mask directory"), manifest)
    optimizer = _run_cvd(args, manifest, frames, masks, poses, intrinsics)
    _write_cvd_outputs(args.out, optimizer, args)
    return 0


_TRACK_KEYS = ("tracks", "masks", "poses", "out", "score", "steps", "learning_rate",
               "seed", "threads")


def _write_refined_tracks(path, optimizer) -> None:
    lines = []
    for track_id, result in enumerate(optimizer.results_):
        track = result.track
        refined = track.refined_points()
        lines.append(
            f"track {track_id} {len(track)} mu {_fmt(result.score.mu)} source {result.score.source}"
        )
        for k in range(len(track)):
            lines.append(
                f"point3 {int(track.frames[k])} {_fmt(refined[k, 0])} {_fmt(refined[k, 1])} "
                f"{_fmt(refined[k, 2])} {_fmt(track.offsets[k])}"
            )
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


def _cmd_track4d(args) -> int:
    tracks = read_tracks(_require(args.tracks, "tracks file"))
    poses, intrinsics = read_poses(_require(args.poses, "poses file"))
    if intrinsics is None:
        raise ValidationError("poses file must carry an intrinsics line")
    masks = None
    if args.score == "mask":
        if args.masks is None:
            raise ValidationError("--masks is required with --score mask")
        masks = load_dynamic_masks(_require(args.masks, "mask directory"))
    optimizer = TrackOptimizer(
        score=args.score, steps=args.steps, learning_rate=args.learning_rate
    )
    optimizer.fit(tracks, masks, poses=poses, intrinsics=intrinsics)
    _write_refined_tracks(args.out, optimizer)
    initial = [float(r.objective_trace[0]) for r in optimizer.results_]
    final = [float(r.objective_trace[-1]) for r in optimizer.results_]
    write_report(
        Path(args.out).with_suffix(".report.txt"),
        _config_entries(args, _TRACK_KEYS)
        + [
            ("result.n_tracks", len(optimizer.results_)),
            ("result.mean_initial_objective", float(np.mean(initial)) if initial else 0.0),
            ("result.mean_final_objective", float(np.mean(final)) if final else 0.0),
        ],
    )
    return 0


def _cmd_eval(args) -> int:
    entries = _config_entries(args, ("target", "pred", "gt", "report"))
    if args.target == "traj":
        pred, _ = read_poses(_require(args.pred, "predicted poses"))
        gt, _ = read_poses(_require(args.gt, "ground-truth poses"))
        result = metrics_mod.trajectory_metrics(pred, gt)
        entries += [
            ("metric.ate", result.ate),
            ("metric.rte", result.rte),
            ("metric.rre", result.rre),
            ("meta.alignment", "umeyama_similarity"),
            ("meta.relative_step", 1),
        ]
    elif args.target == "depth":
        pred = np.stack(read_depth_dir(_require(args.pred, "predicted depth dir")))
        gt = np.stack(read_depth_dir(_require(args.gt, "ground-truth depth dir")))
        result = metrics_mod.depth_metrics(pred, gt)
        entries += [
            ("metric.abs_rel", result.abs_rel),
            ("metric.log_rmse", result.log_rmse),
            ("metric.delta_125", result.delta_125),
            ("meta.scale_alignment", "median"),
        ]
    else:
        pred = load_dynamic_masks(_require(args.pred, "predicted mask dir"))
        gt = load_dynamic_masks(_require(args.gt, "ground-truth mask dir"))
        result = metrics_mod.mask_metrics(pred.masks, gt.masks)
        entries += [("metric.j", result.j), ("metric.f", result.f)]
    write_report(args.report, entries)
    return 0


def _histogram_rows(values: np.ndarray, bins: int = 20):
    counts, edges = np.histogram(values, bins=bins)
    return [(edges[i], edges[i + 1], int(counts[i])) for i in range(len(counts))]


def _cmd_pipeline(args) -> int:
    out = Path(args.out)
    manifest, frames = load_frames(_require(args.manifest, "manifest"))
    masks = None
    if not args.no_mask:
        if args.masks is None:
            raise ValidationError("--masks is required unless --no-mask is given")
        masks = _load_mask_sequence(_require(args.masks, "mask directory"), manifest)

    refiner = _run_ba(args, manifest, frames, masks)
    _write_ba_outputs(out / "ba", refiner, args)

    cvd_masks = masks if args.uncertainty == "mask" else None
    if args.uncertainty == "mask" and masks is None:
        raise ValidationError("pipeline with --uncertainty mask needs --masks")
    optimizer = _run_cvd(args, manifest, frames, cvd_masks, refiner.poses_, refiner.intrinsics_)
    _write_cvd_outputs(out / "cvd", optimizer, args)

    tracks_path = Path(args.tracks) if args.tracks else Path(args.manifest).parent / "tracks.txt"
    track_results = None
    if tracks_path.is_file():
        tracks = read_tracks(tracks_path)
        track_opt = TrackOptimizer(score=args.score, steps=args.track_steps)
        track_masks = masks if args.score == "mask" else None
        if args.score == "mask" and masks is None:
            raise ValidationError("pipeline with --score mask needs --masks")
        track_opt.fit(tracks, track_masks, poses=refiner.poses_, intrinsics=refiner.intrinsics_)
        _write_refined_tracks(out / "tracks_refined.txt", track_opt)
        track_results = track_opt

    entries = _config_entries(args, _BA_KEYS + ("uncertainty", "lambda_flow", "lambda_temp",
                                                "lambda_prior", "steps", "resolution",
                                                "score", "track_steps", "tracks", "gt"))
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)

    gt_dir = Path(args.gt) if args.gt else Path(args.manifest).parent / "gt"
    gt_poses = None
    if (gt_dir / "poses.txt").is_file():
        gt_poses, _ = read_poses(gt_dir / "poses.txt")
    rows = []
    for t, pose in enumerate(refiner.poses_):
        row = [t, *pose.translation]
        if gt_poses is not None:
            row += [*gt_poses[t].translation]
        rows.append(row)
    header = "frame x y z" + (" gt_x gt_y gt_z" if gt_poses is not None else "")
    _write_columns(plots / "trajectory.txt", header, rows)
    _write_columns(plots / "ba_trace.txt", "step objective",
                   list(enumerate(refiner.global_trace_)))
    _write_columns(plots / "cvd_trace.txt", "step objective",
                   list(enumerate(optimizer.solution_.objective_trace)))

    if gt_poses is not None:
        traj = metrics_mod.trajectory_metrics(refiner.poses_, gt_poses)
        entries += [
            ("metric.ate", traj.ate),
            ("metric.rte", traj.rte),
            ("metric.rre", traj.rre),
        ]
    gt_depth_files = sorted(gt_dir.glob("depth_*.ras")) if gt_dir.is_dir() else []
    if gt_depth_files:
        gt_depths = np.stack([read_raster(p).astype(float) for p in gt_depth_files])
        pred = optimizer.solution_.depths
        if pred.shape == gt_depths.shape:
            depth_m = metrics_mod.depth_metrics(pred, gt_depths)
            entries += [
                ("metric.abs_rel", depth_m.abs_rel),
                ("metric.log_rmse", depth_m.log_rmse),
                ("metric.delta_125", depth_m.delta_125),
            ]
            scale = np.median(gt_depths / pred)
            rel_err = (np.abs(pred * scale - gt_depths) / gt_depths).ravel()
            _write_columns(plots / "depth_error_hist.txt", "bin_lo bin_hi count",
                           _histogram_rows(rel_err))
    if track_results is not None:
        initial = [float(r.objective_trace[0]) for r in track_results.results_]
        final = [float(r.objective_trace[-1]) for r in track_results.results_]
        entries += [
            ("metric.track_mean_initial_objective", float(np.mean(initial))),
            ("metric.track_mean_final_objective", float(np.mean(final))),
        ]
        _write_columns(plots / "track_objective_hist.txt", "bin_lo bin_hi count",
                       _histogram_rows(np.array(final)) if final else [])
    write_report(out / "report.txt", entries)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_common(parser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="global seed, recorded in reports")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker parallelism cap (evaluation is deterministic)")


def _add_ba_options(parser) -> None:
    parser.add_argument("--lambda-smooth", dest="lambda_smooth", type=float, default=0.1)
    parser.add_argument("--window-steps", dest="window_steps", type=int, default=400)
    parser.add_argument("--global-steps", dest="global_steps", type=int, default=5000)
    parser.add_argument("--window-size", dest="window_size", type=int, default=8)
    parser.add_argument("--grid-size", dest="grid_size", type=int, default=16)
    parser.add_argument("--learning-rate", dest="learning_rate", type=float, default=1e-3)
    parser.add_argument("--no-mask", dest="no_mask", action="store_true",
                        help="disable mask weighting (all points treated as static)")


def _add_cvd_options(parser, with_lr_default=2e-3) -> None:
    parser.add_argument("--lambda-flow", dest="lambda_flow", type=float, default=1.0)
    parser.add_argument("--lambda-temp", dest="lambda_temp", type=float, default=0.2)
    parser.add_argument("--lambda-prior", dest="lambda_prior", type=float, default=1.0)
    parser.add_argument("--uncertainty", choices=("mask", "free"), default="mask")
    parser.add_argument("--steps", type=int, default=500)
    parser.add_argument("--resolution", default="336x144",
                        help="optimization resolution WxH, or 'native'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynrefine",
        description="Mask-conditioned refinement of camera poses, video depth, and 4D tracks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ba", help="masked bundle adjustment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    _add_ba_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_ba)

    p = sub.add_parser("cvd", help="consistent video depth optimization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks")
    p.add_argument("--poses")
    p.add_argument("--out", required=True)
    _add_cvd_options(p)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=3e-3)
    _add_common(p)
    p.set_defaults(func=_cmd_cvd)

    p = sub.add_parser("track4d", help="4D track refinement along camera rays")
    p.add_argument("--tracks", required=True)
    p.add_argument("--masks")
    p.add_argument("--poses", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--score", choices=("mask", "trail"), default="mask")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=1e-2)
    _add_common(p)
    p.set_defaults(func=_cmd_track4d)

    p = sub.add_parser("eval", help="evaluate trajectories, depths, or masks")
    p.add_argument("target", choices=("traj", "depth", "mask"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", required=True)
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("pipeline", help="run ba, cvd, and track4d on one manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.add_argument("--tracks", help="pixel tracks file (default: tracks.txt beside the manifest)")
    p.add_argument("--gt", help="ground-truth directory (default: gt/ beside the manifest)")
    _add_ba_options(p)
    _add_cvd_options(p)
    p.add_argument("--learning-rate-cvd", dest="learning_rate_cvd", type=float, default=3e-3)
    p.add_argument("--score", choices=("mask", "trail"), default="mask")
    p.add_argument("--track-steps", dest="track_steps", type=int, default=300)
    _add_common(p)
    p.set_defaults(func=_cmd_pipeline)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except _VALIDATION_ERRORS as exc:
        print(f"dynrefine: {exc}", file=sys.stderr)
        return 2
    except DynRefineError as exc:
        print(f"dynrefine: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
