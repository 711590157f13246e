"""Rigid-body algebra: quaternions, SE(3) transforms, dual quaternions.

Quaternions are stored as ``(w, x, y, z)`` numpy arrays. Translations are in
millimetres. Angles at the public surface are degrees unless a name says
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric input (non-unit quaternion, bad shape, ...)."""


# --------------------------------------------------------------------------
# quaternion helpers
# --------------------------------------------------------------------------

def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n < 1e-12:
        raise GeometryError(f"cannot normalize quaternion {q}")
    return q / n


def quat_from_axis_angle(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n < 1e-12:
        return np.array([1.0, 0.0, 0.0, 0.0])
    half = 0.5 * angle_rad
    return np.concatenate(([np.cos(half)], np.sin(half) * axis / n))


def quat_from_rotvec(rotvec) -> np.ndarray:
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec)
    if angle < 1e-12:
        # first-order expansion keeps tiny increments exact enough for LM steps
        q = np.concatenate(([1.0], 0.5 * rotvec))
        return q / np.linalg.norm(q)
    return quat_from_axis_angle(rotvec / angle, angle)


def quat_to_rotvec(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q[0] < 0:
        q = -q
    vec = q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-15:
        return 2.0 * vec
    angle = 2.0 * np.arctan2(s, q[0])
    return vec / s * angle


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Rotation matrix to unit quaternion (Shepperd's method).

    The input is projected onto SO(3) first so slightly non-orthogonal
    matrices (e.g. from a linear solver) are accepted.
    """
    m = np.asarray(m, dtype=float)
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        raise GeometryError("matrix is a reflection, not a rotation")
    tr = np.trace(r)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s, (r[1, 0] - r[0, 1]) / s]
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        q = [(r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s]
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        q = [(r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        q = [(r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate one point ``(3,)`` or many ``(N, 3)`` by ``q``."""
    return np.asarray(points, dtype=float) @ quat_to_matrix(q).T


def _check_unit(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape != (4,) or not np.all(np.isfinite(q)):
        raise GeometryError(f"{name} must be a finite 4-vector, got {q!r}")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise GeometryError(f"{name} is not a unit quaternion (norm {np.linalg.norm(q):.3g})")
    return q


def angular_distance(a, b) -> float:
    """Geodesic angle in degrees between two unit quaternions.

    ``q`` and ``-q`` describe the same rotation, so the result is in
    ``[0, 180]``.
    """
    a = _check_unit(a, "a")
    b = _check_unit(b, "b")
    rel = quat_multiply(quat_conjugate(a), b)
    return float(np.degrees(2.0 * np.arctan2(np.linalg.norm(rel[1:]), abs(rel[0]))))


def slerp(a: np.ndarray, b: np.ndarray, s: float) -> np.ndarray:
    """Shortest-path spherical interpolation, ``s`` in ``[0, 1]``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.dot(a, b) < 0:
        b = -b
    rel = quat_multiply(quat_conjugate(a), b)
    step = quat_from_rotvec(s * quat_to_rotvec(rel))
    return quat_normalize(quat_multiply(a, step))


# --------------------------------------------------------------------------
# SE(3)
# --------------------------------------------------------------------------

class RigidTransform:
    """An element of SE(3): ``p -> R(rotation) p + translation``.

    ``rotation`` is a unit quaternion ``(w, x, y, z)``, ``translation`` in mm.
    Instances are immutable; the array properties are read-only views.
    """

    __slots__ = ("_q", "_t", "_qa", "_ta")

    def __init__(self, rotation=(1.0, 0.0, 0.0, 0.0), translation=(0.0, 0.0, 0.0)):
        q = np.asarray(rotation, dtype=float).reshape(-1)
        t = np.asarray(translation, dtype=float).reshape(-1)
        if q.shape != (4,) or t.shape != (3,):
            raise GeometryError("rotation must have 4 and translation 3 components")
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise GeometryError("non-finite transform component")
        # exact passthrough for already-unit input keeps file round trips byte-stable
        if abs(np.linalg.norm(q) - 1.0) > 1e-12:
            q = quat_normalize(q)
        object.__setattr__(self, "_q", tuple(q.tolist()))
        object.__setattr__(self, "_t", tuple(t.tolist()))
        object.__setattr__(self, "_qa", None)
        object.__setattr__(self, "_ta", None)

    def __setattr__(self, name, value):
        raise AttributeError("RigidTransform is immutable")

    @property
    def rotation(self) -> np.ndarray:
        if self._qa is None:
            a = np.array(self._q)
            a.flags.writeable = False
            object.__setattr__(self, "_qa", a)
        return self._qa

    @property
    def translation(self) -> np.ndarray:
        if self._ta is None:
            a = np.array(self._t)
            a.flags.writeable = False
            object.__setattr__(self, "_ta", a)
        return self._ta

    def __reduce__(self):
        return (RigidTransform, (self._q, self._t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(translation=np.asarray(t, dtype=float))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quat_from_rotvec(rotvec), np.asarray(translation, dtype=float))

    @classmethod
    def from_axis_angle(cls, axis, angle_deg: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(quat_from_axis_angle(axis, np.radians(angle_deg)), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise GeometryError("expected a 4x4 homogeneous matrix")
        return cls(quat_from_matrix(m[:3, :3]), m[:3, 3])

    @property
    def rotation_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation_matrix
        m[:3, 3] = self.translation
        return m

    def as_array(self) -> np.ndarray:
        """7-vector ``(qw, qx, qy, qz, tx, ty, tz)``."""
        return np.concatenate((self.rotation, self.translation))

    @classmethod
    def from_array(cls, values) -> "RigidTransform":
        values = np.asarray(values, dtype=float)
        if values.shape != (7,):
            raise GeometryError("pose array must have 7 values")
        return cls(values[:4], values[4:])

    @property
    def angle_deg(self) -> float:
        """Rotation angle in degrees."""
        return angular_distance(np.array([1.0, 0.0, 0.0, 0.0]), self.rotation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def apply(self, points) -> np.ndarray:
        return transform_point(self, points)

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6g}" for v in self.rotation)
        t = ", ".join(f"{v:.6g}" for v in self.translation)
        return f"RigidTransform(q=[{q}], t=[{t}])"


def _trusted(q, t) -> RigidTransform:
    """Build a transform from already-valid float tuples, skipping validation."""
    out = object.__new__(RigidTransform)
    object.__setattr__(out, "_q", q)
    object.__setattr__(out, "_t", t)
    object.__setattr__(out, "_qa", None)
    object.__setattr__(out, "_ta", None)
    return out


def _rotate_vec(w, x, y, z, vx, vy, vz):
    # v + 2 w (u x v) + 2 u x (u x v), u = (x, y, z)
    cx = y * vz - z * vy
    cy = z * vx - x * vz
    cz = x * vy - y * vx
    return (vx + 2.0 * (w * cx + y * cz - z * cy),
            vy + 2.0 * (w * cy + z * cx - x * cz),
            vz + 2.0 * (w * cz + x * cy - y * cx))


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """``a ∘ b``: apply ``b`` first, then ``a``. Rotation is renormalized."""
    aw, ax, ay, az = a._q
    bw, bx, by, bz = b._q
    qw = aw * bw - ax * bx - ay * by - az * bz
    qx = aw * bx + ax * bw + ay * bz - az * by
    qy = aw * by - ax * bz + ay * bw + az * bx
    qz = aw * bz + ax * by - ay * bx + az * bw
    n = math.sqrt(qw * qw + qx * qx + qy * qy + qz * qz)
    rx, ry, rz = _rotate_vec(aw, ax, ay, az, *b._t)
    tx, ty, tz = a._t
    return _trusted((qw / n, qx / n, qy / n, qz / n), (rx + tx, ry + ty, rz + tz))


def compose_all(*transforms: RigidTransform) -> RigidTransform:
    out = transforms[0]
    for t in transforms[1:]:
        out = compose(out, t)
    return out


def invert(t: RigidTransform) -> RigidTransform:
    w, x, y, z = t._q
    rx, ry, rz = _rotate_vec(w, -x, -y, -z, *t._t)
    return _trusted((w, -x, -y, -z), (-rx, -ry, -rz))


def transform_point(t: RigidTransform, points) -> np.ndarray:
    """Map a point ``(3,)`` or points ``(N, 3)`` through ``t``."""
    return quat_rotate(t.rotation, points) + t.translation


def translation_distance(a: RigidTransform, b: RigidTransform) -> float:
    return float(np.linalg.norm(a.translation - b.translation))


def pose_distance(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """(translation distance in mm, rotation distance in degrees)."""
    return translation_distance(a, b), angular_distance(a.rotation, b.rotation)


def interpolate(a: RigidTransform, b: RigidTransform, s: float) -> RigidTransform:
    """Slerp on rotation, lerp on translation."""
    return RigidTransform(slerp(a.rotation, b.rotation, s), (1.0 - s) * a.translation + s * b.translation)


def random_transform(rng: np.random.Generator, max_translation: float = 100.0,
                     max_angle_deg: float = 180.0) -> RigidTransform:
    """Random transform; rotation uniform on SO(3) when ``max_angle_deg >= 180``."""
    if max_angle_deg >= 180.0:
        q = quat_normalize(rng.normal(size=4))
    else:
        axis = rng.normal(size=3)
        q = quat_from_axis_angle(axis, np.radians(rng.uniform(0.0, max_angle_deg)))
    return RigidTransform(q, rng.uniform(-max_translation, max_translation, size=3))


# --------------------------------------------------------------------------
# dual quaternions
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DualQuaternion:
    real: np.ndarray
    dual: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "real", np.asarray(self.real, dtype=float).reshape(4))
        object.__setattr__(self, "dual", np.asarray(self.dual, dtype=float).reshape(4))

    def __mul__(self, other: "DualQuaternion") -> "DualQuaternion":
        return DualQuaternion(
            quat_multiply(self.real, other.real),
            quat_multiply(self.real, other.dual) + quat_multiply(self.dual, other.real),
        )

    def as_array(self) -> np.ndarray:
        return np.concatenate((self.real, self.dual))

    def is_unit(self, tol: float = UNIT_TOL) -> bool:
        return (abs(np.linalg.norm(self.real) - 1.0) <= tol
                and abs(float(np.dot(self.real, self.dual))) <= tol)


def to_dual_quaternion(t: RigidTransform) -> DualQuaternion:
    """``real = q``, ``dual = 0.5 * (0, t) * q``."""
    tq = np.concatenate(([0.0], t.translation))
    return DualQuaternion(t.rotation.copy(), 0.5 * quat_multiply(tq, t.rotation))


def from_dual_quaternion(dq: DualQuaternion, tol: float = 1e-6) -> RigidTransform:
    if not dq.is_unit(tol):
        raise GeometryError("dual quaternion violates the unit constraints")
    t = 2.0 * quat_multiply(dq.dual, quat_conjugate(dq.real))
    return RigidTransform(dq.real, t[1:])
