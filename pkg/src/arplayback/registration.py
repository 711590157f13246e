"""Occlusion-robust scene registration from fiducial marker corners.

Detections of known markers are pooled over several frames, then a robust
PnP solve (RANSAC over minimal DLT / homography samples, followed by
Levenberg-Marquardt refinement on the consensus set) yields the
camera-from-scene transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .camera import CameraIntrinsics, distort_normalized
from .errors import DegenerateConfigurationError, InsufficientDetectionsError, ValidationError
from .geometry import RigidTransform, quat_from_matrix, quat_from_rotvec, quat_to_matrix
from .errors import FormatError
from .robust import RobustConfig, required_iterations
from .textio import data_lines, fmt_values, parse_floats, read_text

#: Frames pooled before solving, and detections required to attempt a solve.
N_FRAME_THRES = 10
N_DETECT_THRES = 10

COPLANAR_TOL_MM = 1e-6


@dataclass(frozen=True)
class FiducialMap:
    """Marker label -> four scene-frame corners (mm).

    Corner order is top-left, top-right, bottom-right, bottom-left in the
    marker's own frame; detections must use the same order.
    """

    entries: Mapping[int, np.ndarray]

    def __post_init__(self):
        clean = {}
        for label, corners in self.entries.items():
            corners = np.asarray(corners, dtype=float)
            if corners.shape != (4, 3):
                raise ValidationError(f"marker {label}: expected 4 corners of 3 coordinates")
            if not np.all(np.isfinite(corners)):
                raise ValidationError(f"marker {label}: non-finite corner")
            centred = corners - corners.mean(axis=0)
            normal = np.linalg.svd(centred)[2][-1]
            if np.max(np.abs(centred @ normal)) > COPLANAR_TOL_MM:
                raise ValidationError(f"marker {label}: corners are not coplanar")
            clean[int(label)] = corners
        object.__setattr__(self, "entries", clean)

    def __contains__(self, label) -> bool:
        return label in self.entries

    def __getitem__(self, label) -> np.ndarray:
        return self.entries[label]

    def labels(self) -> list[int]:
        return sorted(self.entries)


@dataclass(frozen=True)
class DetectionBatch:
    """Detections from one frame: ``(label, corners (4, 2) px)`` pairs."""

    detections: tuple = ()

    def __post_init__(self):
        dets = []
        for label, corners in self.detections:
            corners = np.asarray(corners, dtype=float)
            if corners.shape != (4, 2):
                raise ValidationError("each detection needs 4 pixel corners")
            dets.append((int(label), corners))
        object.__setattr__(self, "detections", tuple(dets))

    def __len__(self) -> int:
        return len(self.detections)


@dataclass
class CorrespondenceSet:
    image_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    scene_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    n_detect: int = 0

    def __len__(self) -> int:
        return len(self.image_points)


@dataclass
class PnPReport:
    inliers: np.ndarray
    rms_residual_px: float
    iterations: int

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def accumulate(frames: Iterable[DetectionBatch], fmap: FiducialMap,
               n_frame_thres: int = N_FRAME_THRES) -> CorrespondenceSet:
    """Pool known-marker corner correspondences over ``n_frame_thres`` frames.

    Every accepted marker detection in every frame is kept, including repeat
    sightings of the same marker.
    """
    if n_frame_thres < 1:
        raise ValidationError("n_frame_thres must be >= 1")
    img, scene = [], []
    n_detect = 0
    for i, batch in enumerate(frames):
        if i >= n_frame_thres:
            break
        for label, corners in batch.detections:
            if label not in fmap:
                continue
            img.append(corners)
            scene.append(fmap[label])
            n_detect += 1
    if not img:
        return CorrespondenceSet()
    return CorrespondenceSet(np.vstack(img), np.vstack(scene), n_detect)


# --------------------------------------------------------------------------
# minimal solvers
# --------------------------------------------------------------------------

def _normalized(k: CameraIntrinsics, pixels: np.ndarray) -> np.ndarray:
    # distortion ignored here; only used to seed hypotheses
    return np.column_stack(((pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy))


def _pose_from_rt(r: np.ndarray, t: np.ndarray) -> RigidTransform:
    return RigidTransform(quat_from_matrix(r), t)


def _dlt_pose(scene: np.ndarray, xn: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    mean = scene.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.mean(np.linalg.norm(scene - mean, axis=1)), 1e-12)
    xs = (scene - mean) * scale
    n = len(xs)
    xh = np.column_stack((xs, np.ones(n)))
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -xn[:, :1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -xn[:, 1:2] * xh
    p = np.linalg.svd(a)[2][-1].reshape(3, 4)
    norm = np.eye(4)
    norm[:3, :3] *= scale
    norm[:3, 3] = -scale * mean
    p = p @ norm
    m = p[:, :3]
    if np.linalg.det(m) < 0:
        p = -p
        m = -m
    u, s, vt = np.linalg.svd(m)
    r = u @ vt
    t = p[:, 3] / s.mean()
    return [(r, t)]


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    def conditioner(pts):
        mean = pts.mean(axis=0)
        s = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pts - mean, axis=1)), 1e-12)
        return np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])

    ts, td = conditioner(src), conditioner(dst)
    sh = np.column_stack((src, np.ones(len(src)))) @ ts.T
    dh = np.column_stack((dst, np.ones(len(dst)))) @ td.T
    n = len(src)
    a = np.zeros((2 * n, 9))
    a[0::2, 0:3] = sh
    a[0::2, 6:9] = -dh[:, :1] * sh
    a[1::2, 3:6] = sh
    a[1::2, 6:9] = -dh[:, 1:2] * sh
    h = np.linalg.svd(a)[2][-1].reshape(3, 3)
    return np.linalg.inv(td) @ h @ ts


def _plane_basis(scene: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    centroid = scene.mean(axis=0)
    vt = np.linalg.svd(scene - centroid)[2]
    e1, e2 = vt[0], vt[1]
    basis = np.column_stack((e1, e2, np.cross(e1, e2)))
    return centroid, basis


def _planar_pose(scene: np.ndarray, xn: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pose of a planar point set from its homography; returns both flips."""
    centroid, basis = _plane_basis(scene)
    local = (scene - centroid) @ basis
    h = _homography(local[:, :2], xn)
    lam = 2.0 / (np.linalg.norm(h[:, 0]) + np.linalg.norm(h[:, 1]))
    if h[2, 2] * lam < 0:
        lam = -lam
    r1, r2, t_pl = lam * h[:, 0], lam * h[:, 1], lam * h[:, 2]
    u, _, vt = np.linalg.svd(np.column_stack((r1, r2, np.cross(r1, r2))))
    r_pl = u @ vt
    if np.linalg.det(r_pl) < 0:
        r_pl = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    candidates = [r_pl]

    # mirror ambiguity: reflect the plane normal about the line of sight
    normal = r_pl[:, 2]
    sight = t_pl / np.linalg.norm(t_pl)
    mirrored = 2.0 * np.dot(normal, sight) * sight - normal
    axis = np.cross(normal, mirrored)
    if np.linalg.norm(axis) > 1e-9:
        angle = np.arctan2(np.linalg.norm(axis), np.dot(normal, mirrored))
        q = quat_from_rotvec(axis / np.linalg.norm(axis) * angle)
        candidates.append(quat_to_matrix(q) @ r_pl)

    out = []
    for r in candidates:
        rot = r @ basis.T
        out.append((rot, t_pl - rot @ centroid))
    return out


def _shape_rank(points: np.ndarray) -> tuple[float, float]:
    """Relative second and third singular values of the centred points."""
    c = points - points.mean(axis=0)
    ev = np.linalg.eigvalsh(c.T @ c)[::-1]
    s = np.sqrt(np.clip(ev, 0.0, None))
    if s[0] < 1e-12:
        return 0.0, 0.0
    return s[1] / s[0], s[2] / s[0]


def _hypotheses(scene: np.ndarray, xn: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    spread, flatness = _shape_rank(scene)
    if spread < 1e-3:
        return []
    if flatness < 1e-3:
        centroid, basis = _plane_basis(scene)
        local = ((scene - centroid) @ basis)[:, :2]
        # no three sample points may be collinear for a stable homography
        if len(np.unique(np.round(local, 9), axis=0)) < 4:
            return []
        return _planar_pose(scene, xn)
    return _dlt_pose(scene, xn)


# --------------------------------------------------------------------------
# scoring and refinement
# --------------------------------------------------------------------------

def _project(k: CameraIntrinsics, r: np.ndarray, t: np.ndarray, scene: np.ndarray):
    cam = scene @ r.T + t
    z = cam[:, 2]
    safe = np.where(z > 1e-9, z, 1e-9)
    xy = distort_normalized(k, cam[:, :2] / safe[:, None])
    px = np.column_stack((k.fx * xy[:, 0] + k.cx, k.fy * xy[:, 1] + k.cy))
    return px, z


def _errors(k: CameraIntrinsics, r: np.ndarray, t: np.ndarray, scene: np.ndarray,
            image: np.ndarray) -> np.ndarray:
    px, z = _project(k, r, t, scene)
    err = np.linalg.norm(px - image, axis=1)
    err[z <= 1e-9] = np.inf
    return err


def reprojection_errors(pose: RigidTransform, k: CameraIntrinsics, scene: np.ndarray,
                        image: np.ndarray) -> np.ndarray:
    """Per-correspondence pixel error; points behind the camera get ``inf``."""
    return _errors(k, pose.rotation_matrix, pose.translation, scene, image)


def _project_with_jacobian(k: CameraIntrinsics, r: np.ndarray, t: np.ndarray, scene: np.ndarray):
    """Pixels ``(N, 2)`` and Jacobian ``(N, 2, 6)`` w.r.t. ``(dw, dt)`` where
    the pose update is ``R <- exp(dw) R``, ``t <- t + dt``."""
    rp = scene @ r.T
    cam = rp + t
    z = np.where(cam[:, 2] > 1e-9, cam[:, 2], 1e-9)
    x, y = cam[:, 0] / z, cam[:, 1] / z
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k.k1 + r2 * (k.k2 + r2 * k.k3))
    drad = k.k1 + r2 * (2.0 * k.k2 + 3.0 * k.k3 * r2)
    xd = x * radial + 2.0 * k.p1 * x * y + k.p2 * (r2 + 2.0 * x * x)
    yd = y * radial + k.p1 * (r2 + 2.0 * y * y) + 2.0 * k.p2 * x * y
    px = np.column_stack((k.fx * xd + k.cx, k.fy * yd + k.cy))

    dxd_dx = radial + 2.0 * x * x * drad + 2.0 * k.p1 * y + 6.0 * k.p2 * x
    dxd_dy = 2.0 * x * y * drad + 2.0 * k.p1 * x + 2.0 * k.p2 * y
    dyd_dy = radial + 2.0 * y * y * drad + 6.0 * k.p1 * y + 2.0 * k.p2 * x
    # rows of d(pixel) / d(cam); the rotation block is  row . (-[R p]x) = (R p) x row
    u = np.column_stack((dxd_dx, dxd_dy, -(dxd_dx * x + dxd_dy * y))) * (k.fx / z)[:, None]
    v = np.column_stack((dxd_dy, dyd_dy, -(dxd_dy * x + dyd_dy * y))) * (k.fy / z)[:, None]
    jac = np.empty((len(scene), 2, 6))
    for row, d in ((0, u), (1, v)):
        jac[:, row, 0] = rp[:, 1] * d[:, 2] - rp[:, 2] * d[:, 1]
        jac[:, row, 1] = rp[:, 2] * d[:, 0] - rp[:, 0] * d[:, 2]
        jac[:, row, 2] = rp[:, 0] * d[:, 1] - rp[:, 1] * d[:, 0]
        jac[:, row, 3:] = d
    return px, jac


def _refine_rt(r: np.ndarray, t: np.ndarray, k: CameraIntrinsics, scene: np.ndarray,
               image: np.ndarray, max_iter: int = 100) -> tuple[np.ndarray, np.ndarray]:
    px, jac = _project_with_jacobian(k, r, t, scene)
    res = (px - image).ravel()
    cost = res @ res
    lam = 1e-3
    for _ in range(max_iter):
        j = jac.reshape(-1, 6)
        jtj = j.T @ j
        g = j.T @ res
        step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj) + 1e-12), -g)
        r_new = quat_to_matrix(quat_from_rotvec(step[:3])) @ r
        t_new = t + step[3:]
        px_new, jac_new = _project_with_jacobian(k, r_new, t_new, scene)
        res_new = (px_new - image).ravel()
        cost_new = res_new @ res_new
        if cost_new <= cost:
            small = np.linalg.norm(step) < 1e-13 * (1.0 + np.linalg.norm(t))
            r, t, jac, res = r_new, t_new, jac_new, res_new
            done = small or cost - cost_new <= 1e-20 * max(cost, 1e-300)
            cost = cost_new
            lam = max(lam * 0.1, 1e-12)
            if done:
                break
        else:
            lam *= 10.0
            if lam > 1e12:
                break
    u, _, vt = np.linalg.svd(r)
    return u @ vt, t


def refine_pose(pose: RigidTransform, k: CameraIntrinsics, scene: np.ndarray,
                image: np.ndarray) -> RigidTransform:
    """Levenberg-Marquardt on pixel reprojection error, full distortion model.

    Rotation is updated multiplicatively (``exp(dw) R``) and the problem is
    re-linearised at every accepted step, so the analytic Jacobian stays
    exact.
    """
    r, t = _refine_rt(pose.rotation_matrix, pose.translation, k, scene, image)
    return _pose_from_rt(r, t)


def solve_pnp_robust(c: CorrespondenceSet, k: CameraIntrinsics,
                     cfg: RobustConfig | None = None) -> tuple[RigidTransform, PnPReport]:
    """Robust camera-from-scene pose from 2D-3D correspondences.

    Raises:
        InsufficientDetectionsError: fewer than 6 correspondences.
        DegenerateConfigurationError: scene points are collinear or coincident.
    """
    cfg = cfg or RobustConfig()
    scene = np.asarray(c.scene_points, dtype=float)
    image = np.asarray(c.image_points, dtype=float)
    n = len(scene)
    if n < 6:
        raise InsufficientDetectionsError(f"need at least 6 correspondences, got {n}")
    sv = np.linalg.svd(scene - scene.mean(axis=0), compute_uv=False)
    spread, flatness = (sv[1] / sv[0], sv[2] / sv[0]) if sv[0] > 1e-12 else (0.0, 0.0)
    if spread < 1e-9:
        raise DegenerateConfigurationError("scene points are collinear or coincident")
    planar = flatness < 1e-9
    sample_size = 4 if planar else 6
    if planar and len(np.unique(np.round(scene, 9), axis=0)) < 4:
        raise DegenerateConfigurationError("fewer than 4 distinct coplanar points")

    xn = _normalized(k, image)
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold
    best = None  # (count, sse, (r, t), mask)

    def score(rt):
        err = _errors(k, rt[0], rt[1], scene, image)
        mask = err < thr
        return int(mask.sum()), float(np.sum(err[mask] ** 2)), mask

    def better(a, b):
        return b is None or a[0] > b[0] or (a[0] == b[0] and a[1] < b[1])

    needed = cfg.max_iterations
    it = 0
    while it < needed:
        idx = rng.choice(n, size=sample_size, replace=False)
        for rt in _hypotheses(scene[idx], xn[idx]):
            # the linear seed ignores lens distortion; a few steps on the sample
            # itself fit it through the full projection model before scoring
            if np.all(scene[idx] @ rt[0][2] + rt[1][2] > 0):
                rt = _refine_rt(rt[0], rt[1], k, scene[idx], image[idx], 3)
            count, sse, mask = score(rt)
            if not better((count, sse), best):
                continue
            best = (count, sse, rt, mask)
            # local optimisation: nonlinear refits on a consensus set whose gate
            # shrinks from 4x to 1x the threshold, pulling rough linear seeds
            # (which ignore distortion) into the basin of the true pose
            r2, t2 = best[2]
            for widen in (4.0, 2.0, 1.0):
                gate = _errors(k, r2, t2, scene, image) < widen * thr
                if gate.sum() < sample_size:
                    break
                r2, t2 = _refine_rt(r2, t2, k, scene[gate], image[gate], 10)
                c2, s2, m2 = score((r2, t2))
                if better((c2, s2), best):
                    best = (c2, s2, (r2, t2), m2)
            needed = required_iterations(best[0] / n, sample_size, cfg.confidence, cfg.max_iterations)
        it += 1

    if best is None or best[0] < 4:
        raise DegenerateConfigurationError("no valid pose hypothesis could be formed")
    best = (best[0], best[1], _pose_from_rt(*best[2]), best[3])

    pose, mask = best[2], best[3]
    for _ in range(5):
        pose = refine_pose(pose, k, scene[mask], image[mask])
        new_mask = reprojection_errors(pose, k, scene, image) < thr
        if new_mask.sum() < 4:
            break
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    err = reprojection_errors(pose, k, scene, image)
    rms = float(np.sqrt(np.mean(err[mask] ** 2))) if mask.any() else float("inf")
    return pose, PnPReport(mask, rms, it)


def register_scene(frames: Sequence[DetectionBatch], fmap: FiducialMap, k: CameraIntrinsics,
                   cfg: RobustConfig | None = None, n_frame_thres: int = N_FRAME_THRES,
                   n_detect_thres: int = N_DETECT_THRES,
                   return_report: bool = False):
    """Full registration: pool detections, gate on count, robust PnP."""
    corr = accumulate(frames, fmap, n_frame_thres)
    if corr.n_detect < n_detect_thres:
        raise InsufficientDetectionsError(
            f"{corr.n_detect} marker detections, {n_detect_thres} required")
    pose, report = solve_pnp_robust(corr, k, cfg)
    return (pose, report) if return_report else pose


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------
# Fiducial map: one marker per line, ``label x1 y1 z1 x2 y2 z2 x3 y3 z3 x4 y4 z4``
# (scene frame, mm, corner order as in :class:`FiducialMap`).
# Detections: one marker sighting per line, ``frame label u1 v1 u2 v2 u3 v3 u4 v4``
# (pixels). Frames are numbered from 0; frames without detections may be
# skipped in the file but still count toward the frame budget.
# In both formats ``#`` starts a comment.

def parse_fiducial_map(text: str, source: str = "<fiducial map>") -> FiducialMap:
    entries = {}
    for n, tok in data_lines(text, source):
        where = f"{source}:{n}"
        if len(tok) != 13:
            raise FormatError(f"{where}: expected a label and 12 numbers, got {len(tok)} fields")
        try:
            label = int(tok[0])
        except ValueError as exc:
            raise FormatError(f"{where}: marker label must be an integer") from exc
        if label in entries:
            raise FormatError(f"{where}: duplicate marker {label}")
        entries[label] = np.array(parse_floats(tok[1:], where)).reshape(4, 3)
    if not entries:
        raise FormatError(f"{source}: no markers")
    try:
        return FiducialMap(entries)
    except ValidationError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def read_fiducial_map(path) -> FiducialMap:
    return parse_fiducial_map(read_text(path), str(path))


def write_fiducial_map(path, fmap: FiducialMap) -> None:
    lines = [f"{label} {fmt_values(fmap[label].reshape(-1))}" for label in fmap.labels()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# label then 4 corners x y z (mm)\n" + "\n".join(lines) + "\n")


def parse_detections(text: str, source: str = "<detections>") -> list[DetectionBatch]:
    by_frame: dict[int, list] = {}
    for n, tok in data_lines(text, source):
        where = f"{source}:{n}"
        if len(tok) != 10:
            raise FormatError(f"{where}: expected frame, label and 8 numbers, got {len(tok)} fields")
        try:
            frame, label = int(tok[0]), int(tok[1])
        except ValueError as exc:
            raise FormatError(f"{where}: frame and label must be integers") from exc
        if frame < 0:
            raise FormatError(f"{where}: negative frame index")
        by_frame.setdefault(frame, []).append((label, np.array(parse_floats(tok[2:], where)).reshape(4, 2)))
    n_frames = max(by_frame) + 1 if by_frame else 0
    return [DetectionBatch(tuple(by_frame.get(i, ()))) for i in range(n_frames)]


def read_detections(path) -> list[DetectionBatch]:
    return parse_detections(read_text(path), str(path))


def write_detections(path, frames: Sequence[DetectionBatch]) -> None:
    lines = ["# frame label u1 v1 u2 v2 u3 v3 u4 v4 (px)"]
    for i, batch in enumerate(frames):
        for label, corners in batch.detections:
            lines.append(f"{i} {label} {fmt_values(corners.reshape(-1))}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
