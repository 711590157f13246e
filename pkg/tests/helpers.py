"""Shared builders for synthetic test inputs."""

from __future__ import annotations

import numpy as np

from arplayback.calibration import MotionPair, PointPairSet
from arplayback.geometry import RigidTransform, compose, compose_all, invert, random_transform
from arplayback.registration import CorrespondenceSet


def assert_pose_close(a: RigidTransform, b: RigidTransform, mm: float = 1e-9, deg: float = 1e-9) -> None:
    from arplayback.geometry import pose_distance

    dt, dr = pose_distance(a, b)
    assert dt <= mm and dr <= deg, f"pose differs by {dt:.3g} mm / {dr:.3g} deg"


def handeye_sequences(rng, x: RigidTransform, n: int, max_angle: float = 60.0):
    """Camera-from-scene and base-from-ECM sequences consistent with ``x`` (camera-from-ECM)."""
    base_T_scene = random_transform(rng, 300.0)
    robots = [random_transform(rng, 200.0, max_angle) for _ in range(n)]
    cams = [compose_all(x, invert(e), base_T_scene) for e in robots]
    return cams, robots


def correspondence_cloud(rng, pose: RigidTransform, k, n: int = 24, depth=(100.0, 300.0),
                         sigma: float = 0.0, outlier_rate: float = 0.0, outlier_px: float = 50.0):
    """Random scene points inside the image at the given depth range, seen from ``pose``."""
    from arplayback.camera import project_points

    pts_cam = []
    while len(pts_cam) < n:
        z = rng.uniform(*depth)
        u, v = rng.uniform(0.1 * k.width, 0.9 * k.width), rng.uniform(0.1 * k.height, 0.9 * k.height)
        pts_cam.append([(u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z])
    pts_cam = np.array(pts_cam)
    scene = invert(pose).apply(pts_cam)
    px = project_points(k, pts_cam) + sigma * rng.normal(size=(n, 2))
    bad = rng.random(n) < outlier_rate
    px[bad] += rng.uniform(-outlier_px, outlier_px, (int(bad.sum()), 2))
    return CorrespondenceSet(px, scene, n), bad


def point_pairs(rng, t_cor: RigidTransform, n: int = 8, spread: float = 60.0) -> PointPairSet:
    reported = rng.uniform(-spread, spread, (n, 3)) + [0.0, 0.0, 150.0]
    return PointPairSet(t_cor.apply(reported), reported)


def corrupt_pairs(rng, pairs, fraction=0.2):
    """Replace a fraction of motion pairs' camera motions with kicked copies; returns the bad indices too."""
    n = len(pairs)
    bad = rng.choice(n, size=int(round(fraction * n)), replace=False)
    out = list(pairs)
    for i in bad:
        kick = RigidTransform.from_rotvec(rng.normal(size=3) * np.radians(8.0), rng.normal(size=3) * 20.0)
        out[i] = MotionPair(compose(pairs[i].a, kick), pairs[i].b)
    return out, set(bad.tolist())
