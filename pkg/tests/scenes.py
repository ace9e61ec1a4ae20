"""Shared synthetic scene builders for the test suite."""

from dynrefine.synth import Box, CameraPath, Mover, NoiseModel, Plane, SceneSpec

BACKDROP = Plane((0.0, 0.0, -1.0), -6.0)


def static_scene(seed: int, frame_count: int = 12, pose_sigma: float = 0.01,
                 depth_sigma: float = 0.0) -> SceneSpec:
    """Arc camera over planes and boxes; no movers."""
    return SceneSpec(
        frame_count=frame_count,
        width=64,
        height=48,
        focal=60.0,
        camera=CameraPath("arc", radius=1.0, omega=0.03),
        planes=(BACKDROP,),
        boxes=(
            Box((-1.0, 0.2, 4.0), (1.0, 1.0, 1.0)),
            Box((1.2, -0.4, 3.0), (0.8, 0.8, 0.8)),
            Box((0.2, 0.6, 2.2), (0.5, 0.5, 0.4)),
        ),
        noise=NoiseModel(pose_sigma=pose_sigma, depth_sigma=depth_sigma),
        seed=seed,
    )


def mover_scene(seed: int, frame_count: int = 10, pose_sigma: float = 0.01) -> SceneSpec:
    """One fast lateral mover in the foreground covering a large track share."""
    return SceneSpec(
        frame_count=frame_count,
        width=64,
        height=48,
        focal=60.0,
        camera=CameraPath("arc", radius=1.0, omega=0.03),
        planes=(BACKDROP,),
        boxes=(
            Box((-1.4, 0.3, 4.5), (1.2, 1.2, 0.8)),
            Box((1.5, -0.5, 3.5), (1.0, 1.0, 0.6)),
        ),
        movers=(
            Mover(Box((0.0, 0.1, 2.4), (1.4, 1.1, 0.5)), "linear", velocity=(0.10, 0.02, 0.0)),
        ),
        noise=NoiseModel(pose_sigma=pose_sigma),
        seed=seed,
    )


def cvd_scene(seed: int, dynamic: bool, frame_count: int = 8,
              depth_sigma: float = 0.1) -> SceneSpec:
    """Strong-parallax arc camera for depth optimization experiments."""
    movers = ()
    if dynamic:
        movers = (
            Mover(Box((0.0, 0.1, 2.4), (1.2, 1.0, 0.5)), "linear", velocity=(0.10, 0.02, 0.0)),
        )
    return SceneSpec(
        frame_count=frame_count,
        width=64,
        height=48,
        focal=60.0,
        camera=CameraPath("arc", radius=1.0, omega=0.08),
        planes=(BACKDROP,),
        boxes=(
            Box((-1.4, 0.3, 4.2), (1.2, 1.2, 0.8)),
            Box((1.5, -0.5, 3.4), (1.0, 1.0, 0.6)),
        ),
        movers=movers,
        noise=NoiseModel(depth_sigma=depth_sigma),
        seed=seed,
    )


def tiny_scene(seed: int = 0, frame_count: int = 8) -> SceneSpec:
    """Small and fast scene for CLI smoke tests."""
    return SceneSpec(
        frame_count=frame_count,
        width=48,
        height=36,
        focal=45.0,
        camera=CameraPath("arc", radius=1.0, omega=0.05),
        planes=(BACKDROP,),
        boxes=(Box((-1.2, 0.3, 4.2), (1.2, 1.2, 0.8)),),
        movers=(
            Mover(Box((0.0, 0.1, 2.4), (1.1, 0.9, 0.5)), "linear", velocity=(0.08, 0.02, 0.0)),
        ),
        noise=NoiseModel(pose_sigma=0.01, depth_sigma=0.05),
        seed=seed,
        track_grid=6,
    )
