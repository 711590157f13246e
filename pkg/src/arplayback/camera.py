"""Pinhole camera with Brown-Conrady distortion, render matrix and frustum.

Conventions: camera frame is right-handed with +z pointing into the scene and
+y pointing down the image. Normalized device coordinates (NDC) follow pixel
axes (NDC y grows with the pixel row) and depth maps ``near -> -1``,
``far -> +1``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import FormatError
from .textio import fmt, load_toml


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    k3: float = 0.0
    near: float = 10.0
    far: float = 500.0

    def __post_init__(self):
        for f in fields(self):
            cast = int if f.name in ("width", "height") else float
            object.__setattr__(self, f.name, cast(getattr(self, f.name)))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")
        if not (0 < self.near < self.far):
            raise ValueError("clip distances must satisfy 0 < near < far")

    @property
    def distortion(self) -> np.ndarray:
        return np.array([self.k1, self.k2, self.p1, self.p2, self.k3])

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def undistorted(self) -> "CameraIntrinsics":
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                                near=self.near, far=self.far)


def distort_normalized(k: CameraIntrinsics, xy: np.ndarray) -> np.ndarray:
    """Apply radial + tangential distortion to normalized coordinates ``(N, 2)``."""
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3))
    xd = x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y
    return np.stack((xd, yd), axis=-1)


def project_points(k: CameraIntrinsics, p_cam: np.ndarray) -> np.ndarray:
    """Vectorised :func:`project_point` for ``(N, 3)`` camera-frame points."""
    p_cam = np.atleast_2d(np.asarray(p_cam, dtype=float))
    z = p_cam[:, 2]
    if np.any(z <= 0):
        raise BehindCameraError("cannot project a point at or behind the camera plane")
    xy = distort_normalized(k, p_cam[:, :2] / z[:, None])
    return np.column_stack((k.fx * xy[:, 0] + k.cx, k.fy * xy[:, 1] + k.cy))


def project_point(k: CameraIntrinsics, p_cam) -> np.ndarray:
    """Pixel coordinates of one camera-frame point (distortion applied)."""
    return project_points(k, np.asarray(p_cam, dtype=float).reshape(1, 3))[0]


def build_render_matrix(k: CameraIntrinsics) -> np.ndarray:
    """4x4 projection taking camera-frame points to clip space.

    After the perspective divide, visible points land in ``[-1, 1]^3`` and the
    viewport map ``u = (x + 1) W / 2``, ``v = (y + 1) H / 2`` reproduces the
    undistorted pinhole pixel.
    """
    w, h, n, f = float(k.width), float(k.height), k.near, k.far
    return np.array([
        [2.0 * k.fx / w, 0.0, 2.0 * k.cx / w - 1.0, 0.0],
        [0.0, 2.0 * k.fy / h, 2.0 * k.cy / h - 1.0, 0.0],
        [0.0, 0.0, (f + n) / (f - n), -2.0 * f * n / (f - n)],
        [0.0, 0.0, 1.0, 0.0],
    ])


def to_ndc(render: np.ndarray, p_cam: np.ndarray) -> np.ndarray:
    """Clip-space transform plus perspective divide for ``(N, 3)`` points."""
    p_cam = np.atleast_2d(np.asarray(p_cam, dtype=float))
    clip = np.column_stack((p_cam, np.ones(len(p_cam)))) @ render.T
    return clip[:, :3] / clip[:, 3:4]


def ndc_to_pixel(k: CameraIntrinsics, ndc: np.ndarray) -> np.ndarray:
    ndc = np.atleast_2d(np.asarray(ndc, dtype=float))
    return np.column_stack(((ndc[:, 0] + 1.0) * 0.5 * k.width, (ndc[:, 1] + 1.0) * 0.5 * k.height))


@dataclass(frozen=True)
class Frustum:
    """Six inward-facing planes ``(a, b, c, d)``: inside iff ``a x + b y + c z + d > 0``."""

    planes: np.ndarray

    @classmethod
    def from_intrinsics(cls, k: CameraIntrinsics) -> "Frustum":
        m = build_render_matrix(k)
        w = m[3]
        planes = np.array([w + m[0], w - m[0], w + m[1], w - m[1], w + m[2], w - m[2]])
        return cls(planes)

    def contains(self, p_cam: np.ndarray) -> np.ndarray:
        """Boolean mask over ``(N, 3)`` points."""
        p_cam = np.atleast_2d(np.asarray(p_cam, dtype=float))
        vals = np.column_stack((p_cam, np.ones(len(p_cam)))) @ self.planes.T
        return np.all(vals > 0.0, axis=1)


def clip_visible(f: Frustum, p_cam) -> bool:
    return bool(f.contains(np.asarray(p_cam, dtype=float).reshape(1, 3))[0])


# --------------------------------------------------------------------------
# intrinsics config file
# --------------------------------------------------------------------------
# TOML, one camera per file, top-level keys named after the fields:
#   fx = 1000.0   fy = 1000.0   cx = 640.0   cy = 512.0
#   width = 1280  height = 1024
#   k1 = 0.0  k2 = 0.0  p1 = 0.0  p2 = 0.0  k3 = 0.0   (optional, default 0)
#   near = 10.0  far = 500.0                           (optional, mm)

_REQUIRED = ("fx", "fy", "cx", "cy", "width", "height")


def intrinsics_from_dict(table: dict, where: str = "intrinsics") -> CameraIntrinsics:
    known = {f.name for f in fields(CameraIntrinsics)}
    unknown = set(table) - known
    if unknown:
        raise FormatError(f"{where}: unknown field(s) {sorted(unknown)}")
    missing = [k for k in _REQUIRED if k not in table]
    if missing:
        raise FormatError(f"{where}: missing field(s) {missing}")
    values = {}
    for name, value in table.items():
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise FormatError(f"{where}: field {name!r} must be a number")
        values[name] = int(value) if name in ("width", "height") else float(value)
    try:
        return CameraIntrinsics(**values)
    except ValueError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def read_intrinsics(path) -> CameraIntrinsics:
    return intrinsics_from_dict(load_toml(path), str(path))


def write_intrinsics(path, k: CameraIntrinsics) -> None:
    lines = []
    for name, value in asdict(k).items():
        lines.append(f"{name} = {value if isinstance(value, int) else fmt(value)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
