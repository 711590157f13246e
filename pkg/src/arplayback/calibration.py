"""Hand-eye (AX = XB) calibration and kinematic-error correction fitting."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (DegenerateConfigurationError, FormatError, InsufficientDataError,
                     NoConsensusError, UnobservableTranslationError, ValidationError)
from .geometry import (DualQuaternion, GeometryError, RigidTransform, angular_distance, compose,
                       from_dual_quaternion, invert, quat_normalize, quat_to_rotvec,
                       to_dual_quaternion, transform_point)
from .robust import RobustConfig, required_iterations
from .textio import data_lines, fmt_values, parse_floats, read_text

#: Motions rotating less than this have no usable screw axis.
MIN_MOTION_ANGLE_DEG = 0.5
#: Minimum spread between rotation axes for translation to be observable.
MIN_AXIS_SPREAD_DEG = 5.0
HANDEYE_SAMPLE = 3
CORRECTION_SAMPLE = 3


@dataclass(frozen=True)
class MotionPair:
    """Camera motion ``a`` and robot motion ``b`` over the same interval."""

    a: RigidTransform
    b: RigidTransform

    @property
    def angle_gap_deg(self) -> float:
        """Difference of rotation angles; zero for a consistent pair."""
        return abs(self.a.angle_deg - self.b.angle_deg)


@dataclass(frozen=True)
class PointPairSet:
    """``actual[i] ~ T_cor @ reported[i]`` (mm)."""

    actual: np.ndarray
    reported: np.ndarray

    def __post_init__(self):
        actual = np.asarray(self.actual, dtype=float).reshape(-1, 3)
        reported = np.asarray(self.reported, dtype=float).reshape(-1, 3)
        if actual.shape != reported.shape:
            raise ValidationError("actual and reported point lists differ in length")
        if len(actual) < 3:
            raise InsufficientDataError("at least 3 point pairs are required")
        object.__setattr__(self, "actual", actual)
        object.__setattr__(self, "reported", reported)

    def __len__(self) -> int:
        return len(self.actual)

    def subset(self, idx) -> "PointPairSet":
        return PointPairSet(self.actual[idx], self.reported[idx])


@dataclass
class HandEyeReport:
    inliers: np.ndarray
    rotation_residual_deg: np.ndarray
    translation_residual_mm: np.ndarray
    iterations: int

    @property
    def outliers(self) -> np.ndarray:
        return np.flatnonzero(~self.inliers)


@dataclass
class CorrectionReport:
    inliers: np.ndarray
    residual_mm: np.ndarray
    iterations: int

    @property
    def rms_inlier_mm(self) -> float:
        return float(np.sqrt(np.mean(self.residual_mm[self.inliers] ** 2)))


# --------------------------------------------------------------------------
# hand-eye
# --------------------------------------------------------------------------

def build_motion_pairs(cam_poses: Sequence[RigidTransform],
                       robot_poses: Sequence[RigidTransform]) -> list[MotionPair]:
    """Consecutive motion pairs from index-aligned pose sequences.

    ``cam_poses`` are camera-from-scene registrations and ``robot_poses`` are
    base-from-ECM poses. Pair ``i`` is
    ``a = C_i C_{i+1}^-1`` and ``b = E_i^-1 E_{i+1}``.
    """
    if len(cam_poses) != len(robot_poses):
        raise ValidationError(f"{len(cam_poses)} camera poses vs {len(robot_poses)} robot poses")
    if len(cam_poses) < 3:
        raise ValidationError("at least 3 poses are needed")
    pairs = []
    for i in range(len(cam_poses) - 1):
        a = compose(cam_poses[i], invert(cam_poses[i + 1]))
        b = compose(invert(robot_poses[i]), robot_poses[i + 1])
        pairs.append(MotionPair(a, b))
    return pairs


def _left(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, -z, y], [y, z, w, -x], [z, -y, x, w]])


def _right(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([[w, -x, -y, -z], [x, w, z, -y], [y, -z, w, x], [z, y, -x, w]])


def _signed_dq(t: RigidTransform) -> DualQuaternion:
    dq = to_dual_quaternion(t)
    if dq.real[0] < 0:
        return DualQuaternion(-dq.real, -dq.dual)
    return dq


def _constraint_rows(pair: MotionPair) -> np.ndarray:
    """8x8 block of ``a * x - x * b = 0`` in the dual-quaternion unknown ``x``."""
    da, db = _signed_dq(pair.a), _signed_dq(pair.b)
    rot = _left(da.real) - _right(db.real)
    block = np.zeros((8, 8))
    block[:4, :4] = rot
    block[4:, :4] = _left(da.dual) - _right(db.dual)
    block[4:, 4:] = rot
    return block


def _rotation_axis(t: RigidTransform) -> np.ndarray | None:
    rv = quat_to_rotvec(t.rotation)
    angle = np.linalg.norm(rv)
    if np.degrees(angle) < MIN_MOTION_ANGLE_DEG:
        return None
    return rv / angle


def axis_spread_deg(pairs: Sequence[MotionPair]) -> float:
    """Largest sign-insensitive angle between rotation axes of the robot motions."""
    axes = [ax for ax in (_rotation_axis(p.b) for p in pairs) if ax is not None]
    best = 0.0
    for i in range(len(axes)):
        for j in range(i + 1, len(axes)):
            c = min(1.0, abs(float(np.dot(axes[i], axes[j]))))
            best = max(best, math.degrees(math.acos(c)))
    return best


def _daniilidis(pairs: Sequence[MotionPair]) -> RigidTransform:
    m = np.vstack([_constraint_rows(p) for p in pairs])
    vt = np.linalg.svd(m)[2]
    v1, v2 = vt[-2], vt[-1]
    u1, w1, u2, w2 = v1[:4], v1[4:], v2[:4], v2[4:]
    # x = c1 v1 + c2 v2 must satisfy real . dual = 0: a quadratic form in (c1, c2)
    form = np.array([[u1 @ w1, 0.5 * (u1 @ w2 + u2 @ w1)],
                     [0.5 * (u1 @ w2 + u2 @ w1), u2 @ w2]])
    evals, evecs = np.linalg.eigh(form)
    candidates = []
    if evals[0] * evals[1] < 0:
        ratio = math.sqrt(-evals[0] / evals[1])
        for sign in (1.0, -1.0):
            candidates.append(evecs[:, 0] + sign * ratio * evecs[:, 1])
    else:
        # noise pushed the form definite; take its flattest direction
        candidates.append(evecs[:, int(np.argmin(np.abs(evals)))])
    best = None
    for c in candidates:
        x = c[0] * v1 + c[1] * v2
        norm = np.linalg.norm(x[:4])
        if best is None or norm > best[0]:
            best = (norm, x)
    x = best[1] / best[0]
    real = quat_normalize(x[:4])
    dual = x[4:] - (real @ x[4:]) * real
    return from_dual_quaternion(DualQuaternion(real, dual))


def handeye_residuals(x: RigidTransform, pairs: Sequence[MotionPair]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (rotation deg, translation mm) mismatch between ``a X`` and ``X b``."""
    rot, trans = [], []
    for p in pairs:
        lhs = compose(p.a, x)
        rhs = compose(x, p.b)
        rot.append(angular_distance(lhs.rotation, rhs.rotation))
        trans.append(float(np.linalg.norm(lhs.translation - rhs.translation)))
    return np.array(rot), np.array(trans)


def motion_prediction_errors(x: RigidTransform, pairs: Sequence[MotionPair]) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair (translation mm, rotation deg) between ``a`` and the predicted ``X b X^-1``."""
    trans, rot = [], []
    for p in pairs:
        pred = compose(compose(x, p.b), invert(x))
        trans.append(float(np.linalg.norm(pred.translation - p.a.translation)))
        rot.append(angular_distance(pred.rotation, p.a.rotation))
    return np.array(trans), np.array(rot)


def _check_observable(pairs: Sequence[MotionPair]) -> None:
    if axis_spread_deg(pairs) < MIN_AXIS_SPREAD_DEG:
        raise UnobservableTranslationError(
            f"rotation axes spread less than {MIN_AXIS_SPREAD_DEG} deg; translation is unobservable")


def solve_handeye(pairs: Sequence[MotionPair], cfg: RobustConfig | None = None,
                  return_report: bool = False):
    """Robust dual-quaternion solution of ``a_i X = X b_i``.

    With ``a`` built from camera-from-scene registrations and ``b`` from
    base-from-ECM poses, ``X`` is the camera-from-ECM transform; the
    ECM-to-camera hand-eye is its inverse.

    Raises:
        InsufficientDataError: fewer than 2 pairs.
        UnobservableTranslationError: rotation axes (near) parallel.
    """
    cfg = cfg or RobustConfig()
    pairs = list(pairs)
    n = len(pairs)
    if n < 2:
        raise InsufficientDataError(f"need at least 2 motion pairs, got {n}")
    _check_observable(pairs)

    def classify(x):
        rot, trans = handeye_residuals(x, pairs)
        mask = (rot <= cfg.angle_threshold_deg) & (trans <= cfg.inlier_threshold)
        cost = float(np.sum(rot[mask] / cfg.angle_threshold_deg) + np.sum(trans[mask] / cfg.inlier_threshold))
        return mask, cost

    rng = np.random.default_rng(cfg.seed)
    sample = min(HANDEYE_SAMPLE, n)
    best = None  # (count, cost, x, mask)
    needed = cfg.max_iterations
    it = 0
    while it < needed:
        idx = np.sort(rng.choice(n, size=sample, replace=False))
        it += 1
        subset = [pairs[i] for i in idx]
        if axis_spread_deg(subset) < MIN_AXIS_SPREAD_DEG:
            continue
        x = _daniilidis(subset)
        mask, cost = classify(x)
        count = int(mask.sum())
        if best is None or count > best[0] or (count == best[0] and cost < best[1]):
            best = (count, cost, x, mask)
            needed = required_iterations(count / n, sample, cfg.confidence, cfg.max_iterations)
        if n == sample:
            break

    if best is None:
        raise UnobservableTranslationError("no sample of motion pairs had diverse rotation axes")
    x, mask = best[2], best[3]
    for _ in range(5):
        inlier_pairs = [p for p, keep in zip(pairs, mask) if keep]
        if len(inlier_pairs) < 2 or axis_spread_deg(inlier_pairs) < MIN_AXIS_SPREAD_DEG:
            break
        x = _daniilidis(inlier_pairs)
        new_mask, _ = classify(x)
        if np.array_equal(new_mask, mask) or new_mask.sum() < 2:
            break
        mask = new_mask
    rot, trans = handeye_residuals(x, pairs)
    report = HandEyeReport(mask, rot, trans, it)
    return (x, report) if return_report else x


# --------------------------------------------------------------------------
# point-set alignment
# --------------------------------------------------------------------------

def kabsch_umeyama(pairs: PointPairSet) -> RigidTransform:
    """Least-squares proper rigid transform (no scale) mapping reported -> actual."""
    src, dst = pairs.reported, pairs.actual
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    cs, cd = src - mu_s, dst - mu_d
    for pts in (cs, cd):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[0] < 1e-12 or sv[1] / sv[0] < 1e-9:
            if sv[0] < 1e-12 and np.allclose(cs, 0.0) and np.allclose(cd, 0.0):
                # every pair is the same point: pure translation
                return RigidTransform.from_translation(mu_d - mu_s)
            raise DegenerateConfigurationError("point pairs are collinear or coincident")
    cov = cd.T @ cs / len(src)
    u, _, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    return RigidTransform.from_matrix(_homogeneous(r, mu_d - r @ mu_s))


def _homogeneous(r: np.ndarray, t: np.ndarray) -> np.ndarray:
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return m


def point_residuals(t: RigidTransform, pairs: PointPairSet) -> np.ndarray:
    return np.linalg.norm(transform_point(t, pairs.reported) - pairs.actual, axis=1)


def _nondegenerate(pts: np.ndarray) -> bool:
    sv = np.linalg.svd(pts - pts.mean(axis=0), compute_uv=False)
    return sv[0] > 1e-12 and sv[1] / sv[0] > 1e-6


def fit_correction(pairs: PointPairSet, cfg: RobustConfig | None = None, min_inliers: int = 3,
                   return_report: bool = False):
    """Robust rigid fit of the API correction transform.

    Samples of 3 pairs are drawn exhaustively when the number of subsets
    fits in ``cfg.max_iterations``, otherwise at random.
    """
    cfg = cfg or RobustConfig()
    n = len(pairs)
    if not (_nondegenerate(pairs.reported) and _nondegenerate(pairs.actual)):
        # identical or collinear sets: defer to the direct solve (identity or error)
        t = kabsch_umeyama(pairs)
        res = point_residuals(t, pairs)
        report = CorrectionReport(np.ones(n, dtype=bool), res, 0)
        return (t, report) if return_report else t

    if math.comb(n, CORRECTION_SAMPLE) <= cfg.max_iterations:
        samples = (np.array(c) for c in itertools.combinations(range(n), CORRECTION_SAMPLE))
        exhaustive = True
    else:
        rng = np.random.default_rng(cfg.seed)
        samples = (np.sort(rng.choice(n, size=CORRECTION_SAMPLE, replace=False))
                   for _ in range(cfg.max_iterations))
        exhaustive = False

    best = None  # (count, sse, t, mask)
    needed = cfg.max_iterations
    it = 0
    for idx in samples:
        if not exhaustive and it >= needed:
            break
        it += 1
        sub = pairs.subset(idx)
        if not (_nondegenerate(sub.reported) and _nondegenerate(sub.actual)):
            continue
        t = kabsch_umeyama(sub)
        res = point_residuals(t, pairs)
        mask = res <= cfg.inlier_threshold
        count = int(mask.sum())
        sse = float(np.sum(res[mask] ** 2))
        if best is None or count > best[0] or (count == best[0] and sse < best[1]):
            best = (count, sse, t, mask)
            if not exhaustive:
                needed = required_iterations(count / n, CORRECTION_SAMPLE, cfg.confidence,
                                             cfg.max_iterations)

    if best is None or best[0] < max(min_inliers, CORRECTION_SAMPLE):
        raise NoConsensusError("no correction hypothesis reached the minimum consensus")
    t, mask = best[2], best[3]
    for _ in range(5):
        t = kabsch_umeyama(pairs.subset(mask))
        new_mask = point_residuals(t, pairs) <= cfg.inlier_threshold
        if np.array_equal(new_mask, mask) or new_mask.sum() < CORRECTION_SAMPLE:
            break
        mask = new_mask
    report = CorrectionReport(mask, point_residuals(t, pairs), it)
    return (t, report) if return_report else t


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------
# Pose sequence: one pose per line, ``qw qx qy qz tx ty tz`` (mm). A single
# pose file (registration or hand-eye output) is a one-line sequence.
# Point pairs: one pair per line, ``ax ay az rx ry rz`` (actual then
# reported, mm). ``#`` starts a comment in both.

def parse_pose_sequence(text: str, source: str = "<poses>") -> list[RigidTransform]:
    poses = []
    for n, tok in data_lines(text, source):
        where = f"{source}:{n}"
        if len(tok) != 7:
            raise FormatError(f"{where}: expected 7 numbers, got {len(tok)}")
        values = parse_floats(tok, where)
        if abs(np.linalg.norm(values[:4]) - 1.0) > 1e-6:
            raise FormatError(f"{where}: quaternion is not unit length")
        try:
            poses.append(RigidTransform.from_array(values))
        except GeometryError as exc:
            raise FormatError(f"{where}: {exc}") from exc
    return poses


def read_pose_sequence(path) -> list[RigidTransform]:
    return parse_pose_sequence(read_text(path), str(path))


def read_pose(path) -> RigidTransform:
    poses = read_pose_sequence(path)
    if len(poses) != 1:
        raise FormatError(f"{path}: expected exactly one pose, found {len(poses)}")
    return poses[0]


def format_pose_sequence(poses: Sequence[RigidTransform]) -> str:
    lines = ["# qw qx qy qz tx ty tz (mm)"]
    lines += [fmt_values(p.as_array()) for p in poses]
    return "\n".join(lines) + "\n"


def write_pose_sequence(path, poses: Sequence[RigidTransform]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_pose_sequence(poses))


def parse_point_pairs(text: str, source: str = "<point pairs>") -> PointPairSet:
    rows = []
    for n, tok in data_lines(text, source):
        where = f"{source}:{n}"
        if len(tok) != 6:
            raise FormatError(f"{where}: expected 6 numbers, got {len(tok)}")
        rows.append(parse_floats(tok, where))
    arr = np.array(rows).reshape(-1, 6)
    return PointPairSet(arr[:, :3], arr[:, 3:])


def read_point_pairs(path) -> PointPairSet:
    return parse_point_pairs(read_text(path), str(path))


def write_point_pairs(path, pairs: PointPairSet) -> None:
    lines = ["# actual x y z, reported x y z (mm)"]
    lines += [fmt_values(np.concatenate((a, r))) for a, r in zip(pairs.actual, pairs.reported)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
