"""Synthetic ground-truth world and end-to-end error evaluation.

The simulated world has a task board carrying six fiducial markers, a stereo
endoscope on an ECM, one instrument following a keyframed path above the
board, and two independent robot setups ("sessions") that differ in where
the board sits relative to the robot base and in how the ECM moves.

A scenario runs the full chain: register the board, calibrate both hand-eye
transforms, fit the kinematic correction, record in session ``a``, register
again in session ``b`` and play the recording back there, then compares every
intermediate and final product against the truth.

Random draws come from one ``SeedSequence`` per scenario seed, split into one
child stream per stage (``spawn_key=(stage_index,)``), so enabling, disabling
or extending a stage never shifts another stage's draws. Noise draws are made
even when the corresponding magnitude is zero, which keeps runs at different
noise levels on common random numbers.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field, fields, replace
from typing import Sequence

import numpy as np

from .calibration import (PointPairSet, build_motion_pairs, fit_correction, motion_prediction_errors,
                          solve_handeye)
from .camera import CameraIntrinsics, Frustum, build_render_matrix, project_points
from .errors import FormatError, ValidationError
from .geometry import (RigidTransform, angular_distance, compose, compose_all, interpolate, invert,
                       pose_distance, quat_from_matrix)
from .instrument import COMPONENTS, InstrumentModel, JointState, default_instrument, place_components
from .pipeline import (CAMERAS, SessionState, Trajectory, TrajectorySample, playback_iter, record_sample,
                       view_to_scene)
from .registration import DetectionBatch, FiducialMap, register_scene
from .robust import RobustConfig
from .textio import fmt, load_toml

STAGES = ("world", "registration", "handeye", "correction", "record", "playback", "relative")
SESSIONS = ("a", "b")
INSTRUMENT_ID = "PSM1"


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for one stage of one scenario seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STAGES.index(stage),)))


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSpec:
    """Observation and reporting noise.

    ``pixel_sigma`` is the per-coordinate standard deviation of corner noise.
    Outlier corners (probability ``outlier_rate``) get a uniform offset of up to
    ``outlier_px`` per coordinate. Pose noise magnitudes are RMS values: a
    rotation noise of 1 deg has ``E[angle^2] = 1 deg^2``. ``psm_*`` perturbs
    the API-reported PSM pose, ``ecm_*`` the ECM kinematics read during
    hand-eye calibration and ``mount_*`` the marker mount used to score pose
    estimation. ``occlusion`` lists ``(label, first_frame, last_frame)``
    intervals during which a marker is hidden (``last_frame = -1``: forever).
    """

    pixel_sigma: float = 0.0
    outlier_rate: float = 0.0
    outlier_px: float = 0.0
    psm_rot_deg: float = 0.0
    psm_trans_mm: float = 0.0
    ecm_rot_deg: float = 0.0
    ecm_trans_mm: float = 0.0
    mount_rot_deg: float = 0.0
    mount_trans_mm: float = 0.0
    occlusion: tuple = ()
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name in ("occlusion", "seed"):
                continue
            v = float(getattr(self, f.name))
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"noise field {f.name} must be finite and >= 0")
            object.__setattr__(self, f.name, v)
        if self.outlier_rate > 1.0:
            raise ValidationError("outlier_rate must lie in [0, 1]")
        occ = []
        for item in self.occlusion:
            if len(item) != 3:
                raise ValidationError("occlusion entries are (label, first_frame, last_frame)")
            label, first, last = (int(v) for v in item)
            if first < 0 or (last != -1 and last < first):
                raise ValidationError(f"bad occlusion interval {item}")
            occ.append((label, first, last))
        object.__setattr__(self, "occlusion", tuple(occ))

    def occluded(self, label: int, frame_index: int) -> bool:
        return any(lab == label and first <= frame_index and (last == -1 or frame_index <= last)
                   for lab, first, last in self.occlusion)


PRESETS = {
    "zero": NoiseSpec(),
    # Tuned so stage errors sit in the same ranges as the physical rig's
    # hand-eye, correction and registration measurements (see README).
    "paper-comparable": NoiseSpec(pixel_sigma=0.5, outlier_rate=0.05, outlier_px=30.0,
                                  psm_rot_deg=4.0, psm_trans_mm=0.4,
                                  ecm_rot_deg=1.5, ecm_trans_mm=5.5,
                                  mount_rot_deg=1.5, mount_trans_mm=3.0),
}

#: Solver settings that go with a preset; explicit scenario values win.
PRESET_CONFIG = {
    "zero": {},
    # kinematic noise of this size needs wider hand-eye consensus gates
    "paper-comparable": {"handeye_trans_mm": 25.0, "handeye_angle_deg": 6.0},
}


def preset(name: str) -> NoiseSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown noise preset {name!r}; choose from {sorted(PRESETS)}") from None


def pose_noise(rng: np.random.Generator, rot_rms_deg: float, trans_rms_mm: float) -> RigidTransform:
    """Random small transform with the given RMS rotation angle and translation norm."""
    rv = rng.normal(0.0, 1.0, 3) * (math.radians(rot_rms_deg) / math.sqrt(3.0))
    tv = rng.normal(0.0, 1.0, 3) * (trans_rms_mm / math.sqrt(3.0))
    return RigidTransform.from_rotvec(rv, tv)


# --------------------------------------------------------------------------
# world
# --------------------------------------------------------------------------

def default_cameras() -> dict[str, CameraIntrinsics]:
    k = CameraIntrinsics(fx=1000.0, fy=1000.0, cx=640.0, cy=512.0, width=1280, height=1024,
                         k1=-0.08, k2=0.02, p1=0.0005, p2=-0.0003)
    return {"left": k, "right": replace(k, cx=636.0, cy=514.0)}


def default_fiducial_map(side: float = 10.0) -> FiducialMap:
    """Six square markers on a stepped, partly tilted board (not all coplanar)."""
    layout = [  # centre x, y, z, tilt about x (deg), tilt about y (deg)
        (-25.0, -15.0, 0.0, 0.0, 0.0),
        (0.0, -15.0, 4.0, 10.0, 0.0),
        (25.0, -15.0, 0.0, 0.0, -12.0),
        (-25.0, 15.0, 8.0, -8.0, 6.0),
        (0.0, 15.0, 0.0, 0.0, 0.0),
        (25.0, 15.0, 3.0, 6.0, 10.0),
    ]
    h = side / 2.0
    square = np.array([[-h, -h, 0.0], [h, -h, 0.0], [h, h, 0.0], [-h, h, 0.0]])
    entries = {}
    for label, (x, y, z, ax, ay) in enumerate(layout):
        r = (RigidTransform.from_axis_angle([1, 0, 0], ax) @ RigidTransform.from_axis_angle([0, 1, 0], ay))
        entries[label] = r.apply(square) + [x, y, z]
    return FiducialMap(entries)


def look_at(eye, target, roll_deg: float = 0.0) -> RigidTransform:
    """Scene-from-camera pose with +z toward ``target`` and a roll about it."""
    eye, target = np.asarray(eye, float), np.asarray(target, float)
    z = target - eye
    z /= np.linalg.norm(z)
    helper = np.array([0.0, 1.0, 0.0]) if abs(z[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.column_stack((x, y, z))
    base = RigidTransform(quat_from_matrix(r), eye)
    return base @ RigidTransform.from_axis_angle([0, 0, 1], roll_deg)


def random_view(rng: np.random.Generator, centre, depth=(120.0, 220.0), tilt_deg: float = 25.0,
                roll_deg=(0.0, 360.0), target_jitter: float = 8.0) -> RigidTransform:
    """Camera-from-scene view of ``centre`` from above the board."""
    d = rng.uniform(*depth)
    tilt = math.radians(rng.uniform(0.0, tilt_deg))
    az = rng.uniform(0.0, 2.0 * math.pi)
    direction = np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])
    target = np.asarray(centre, float) + rng.uniform(-target_jitter, target_jitter, 3) * [1, 1, 0]
    return invert(look_at(target + d * direction, target, rng.uniform(*roll_deg)))


@dataclass(frozen=True)
class SessionTruth:
    """One robot setup: board placement in the base frame and ECM keyframes."""

    base_T_scene: RigidTransform
    ecm_times: tuple
    ecm_poses: tuple

    def ecm_pose(self, t: float) -> RigidTransform:
        times = self.ecm_times
        if t <= times[0]:
            return self.ecm_poses[0]
        if t >= times[-1]:
            return self.ecm_poses[-1]
        i = bisect.bisect_right(times, t) - 1
        s = (t - times[i]) / (times[i + 1] - times[i])
        return interpolate(self.ecm_poses[i], self.ecm_poses[i + 1], s)


@dataclass(frozen=True)
class WorldTruth:
    fmap: FiducialMap
    cameras: dict
    handeye: dict           # camera -> ECM-from-camera
    corrections: dict       # instrument -> correction in the initial left-camera frame
    sessions: dict          # name -> SessionTruth
    tool: Trajectory        # scene-frame keyframes
    instrument: InstrumentModel
    psm_T_ar: RigidTransform = field(default_factory=lambda: RigidTransform.from_translation([0.0, 0.0, 5.0]))

    @property
    def board_centre(self) -> np.ndarray:
        return np.mean([self.fmap[label].mean(axis=0) for label in self.fmap.labels()], axis=0)

    def ecm_for_view(self, session: str, view: RigidTransform, camera: str = "left") -> RigidTransform:
        """Base-from-ECM pose placing ``camera`` at camera-from-scene ``view``."""
        st = self.sessions[session]
        return compose_all(st.base_T_scene, invert(view), invert(self.handeye[camera]))

    def view(self, session: str, ecm: RigidTransform, camera: str = "left") -> RigidTransform:
        """True camera-from-scene transform for a base-from-ECM pose."""
        st = self.sessions[session]
        return compose_all(invert(self.handeye[camera]), invert(ecm), st.base_T_scene)

    def view_at(self, session: str, t: float, camera: str = "left") -> RigidTransform:
        return self.view(session, self.sessions[session].ecm_pose(t), camera)

    def initial_view(self, session: str, camera: str = "left") -> RigidTransform:
        return self.view_at(session, self.sessions[session].ecm_times[0], camera)

    def covers(self, session: str, t: float) -> bool:
        times = self.sessions[session].ecm_times
        return times[0] - 1e-9 <= t <= times[-1] + 1e-9

    def tool_state(self, t: float) -> TrajectorySample:
        return playback_iter(self.tool, 1.0, max(0.0, t - self.tool.samples[0].t))

    @property
    def t0(self) -> float:
        return self.tool.samples[0].t

    @property
    def t_end(self) -> float:
        return self.tool.samples[-1].t


def _tool_orientation(rng: np.random.Generator, max_tilt_deg: float = 40.0) -> RigidTransform:
    """End-effector x axis pointing down into the board, tilted and rolled at random."""
    tilt = math.radians(rng.uniform(0.0, max_tilt_deg))
    az = rng.uniform(0.0, 2.0 * math.pi)
    x = -np.array([math.sin(tilt) * math.cos(az), math.sin(tilt) * math.sin(az), math.cos(tilt)])
    helper = np.array([0.0, 1.0, 0.0]) if abs(x[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    y = np.cross(helper, x)
    y /= np.linalg.norm(y)
    z = np.cross(x, y)
    r = RigidTransform(quat_from_matrix(np.column_stack((x, y, z))))
    return r @ RigidTransform.from_axis_angle([1, 0, 0], rng.uniform(0.0, 360.0))


def random_tool_keyframes(rng: np.random.Generator, centre, duration: float, spacing: float = 2.5,
                          m: InstrumentModel | None = None) -> Trajectory:
    m = m or default_instrument()
    n = max(2, int(math.ceil(duration / spacing)) + 1)
    samples = []
    for i in range(n):
        t = min(i * spacing, duration)
        pos = np.asarray(centre, float) + [rng.uniform(-25, 25), rng.uniform(-18, 18), rng.uniform(6, 35)]
        pose = RigidTransform(_tool_orientation(rng).rotation, pos)
        joints = JointState(rng.uniform(-0.8, 0.8), rng.uniform(-0.8, 0.8), rng.uniform(0.0, 1.0))
        m.check_joints(joints)
        samples.append(TrajectorySample(t, pose, joints, INSTRUMENT_ID))
        if t >= duration:
            break
    return Trajectory(samples)


def random_session(rng: np.random.Generator, handeye_left: RigidTransform, centre, duration: float,
                   spacing: float = 10.0, views: Sequence[RigidTransform] | None = None,
                   base: RigidTransform | None = None) -> SessionTruth:
    """Random board placement plus ECM keyframes that keep the board in view."""
    if base is None:
        base = RigidTransform.from_rotvec(rng.normal(0, 1.0, 3), rng.uniform(-300, 300, 3))
    if views is None:
        n = max(2, int(math.ceil(duration / spacing)) + 1)
        roll0 = rng.uniform(0.0, 360.0)
        views = [random_view(rng, centre, depth=(130.0, 200.0), tilt_deg=20.0,
                             roll_deg=(roll0 - 15.0, roll0 + 15.0)) for _ in range(n)]
    times = tuple(float(v) for v in np.linspace(0.0, duration, len(views)))
    poses = tuple(compose_all(base, invert(v), invert(handeye_left)) for v in views)
    return SessionTruth(base, times, poses)


def make_world(seed: int = 0, duration: float = 50.0, spec: "ScenarioSpec | None" = None) -> WorldTruth:
    """Ground-truth world for one scenario seed."""
    rng = stage_rng(seed, "world")
    over = spec.world if spec is not None else WorldOverrides()
    fmap = over.fmap or default_fiducial_map()
    cameras = dict(over.cameras) if over.cameras else default_cameras()
    m = over.instrument or default_instrument()
    centre = np.mean([fmap[label].mean(axis=0) for label in fmap.labels()], axis=0)

    he_left = RigidTransform.from_rotvec(rng.normal(0, 1.0, 3), rng.uniform(-40, 40, 3))
    stereo = RigidTransform.from_axis_angle([0, 1, 0], -1.0, [5.0, 0.0, 0.0])
    handeye = {"left": he_left, "right": he_left @ stereo}
    correction = RigidTransform.from_rotvec(rng.normal(0, math.radians(1.0), 3), rng.normal(0, 3.0, 3))
    tool = over.tool or random_tool_keyframes(rng, centre, duration, m=m)
    sessions = {}
    for name in SESSIONS:
        views = over.views.get(name)
        base = over.bases.get(name)
        sessions[name] = random_session(rng, he_left, centre, duration, views=views, base=base)
    return WorldTruth(fmap, cameras, handeye, {INSTRUMENT_ID: correction}, sessions, tool, m)


# --------------------------------------------------------------------------
# observations
# --------------------------------------------------------------------------

def observe_fiducials(world: WorldTruth, camera: str, frame_index: int, noise: NoiseSpec,
                      rng: np.random.Generator | None = None, view: RigidTransform | None = None,
                      session: str = "a") -> DetectionBatch:
    """Synthetic marker detections in one frame.

    ``view`` defaults to the camera's pose at the session's initial ECM pose.
    Markers that are occluded, behind the camera or not fully inside the image
    are left out.
    """
    if frame_index < 0:
        raise ValidationError("frame index must be non-negative")
    if rng is None:
        rng = np.random.default_rng([noise.seed, frame_index, CAMERAS.index(camera)])
    k = world.cameras[camera]
    view = view if view is not None else world.initial_view(session, camera)
    dets = []
    for label in world.fmap.labels():
        pc = view.apply(world.fmap[label])
        # always draw, so visibility changes never shift later draws
        gauss = rng.normal(0.0, 1.0, (4, 2))
        is_out = rng.random(4) < noise.outlier_rate
        offsets = rng.uniform(-1.0, 1.0, (4, 2))
        if noise.occluded(label, frame_index) or np.any(pc[:, 2] <= k.near):
            continue
        px = project_points(k, pc)
        if np.any(px < 0) or np.any(px[:, 0] >= k.width) or np.any(px[:, 1] >= k.height):
            continue
        px = px + noise.pixel_sigma * gauss
        px[is_out] += noise.outlier_px * offsets[is_out]
        dets.append((label, px))
    return DetectionBatch(tuple(dets))


def observe_frames(world: WorldTruth, camera: str, n_frames: int, noise: NoiseSpec,
                   rng: np.random.Generator, view: RigidTransform | None = None,
                   session: str = "a") -> list[DetectionBatch]:
    return [observe_fiducials(world, camera, i, noise, rng, view, session) for i in range(n_frames)]


def reported_psm_pose(world: WorldTruth, t: float, noise: NoiseSpec, rng: np.random.Generator | None = None,
                      session: str = "a", true_pose: RigidTransform | None = None,
                      ecm: RigidTransform | None = None) -> RigidTransform:
    """API-reported ECM-from-PSM pose.

    The true pose is corrupted by the inverse of the true correction (which
    acts in the initial left-camera frame, so it is conjugated through the
    hand-eye and the ECM motion) and then by random noise at the end-effector.
    ``true_pose`` and ``ecm`` override the keyframed tool and ECM at ``t``.
    """
    st = world.sessions[session]
    if ecm is None and not world.covers(session, t):
        raise ValidationError(f"t={t} outside the session's ECM trajectory")
    if rng is None:
        rng = np.random.default_rng([noise.seed, int(round(t * 1e6))])
    ecm = ecm if ecm is not None else st.ecm_pose(t)
    s_T_psm = true_pose if true_pose is not None else world.tool_state(t).pose
    true_ecm_psm = compose_all(invert(ecm), st.base_T_scene, s_T_psm)
    x = world.handeye["left"]
    motion = compose(invert(st.ecm_poses[0]), ecm)
    corrupt = compose_all(invert(motion), x, invert(world.corrections[INSTRUMENT_ID]), invert(x), motion)
    return compose_all(corrupt, true_ecm_psm, pose_noise(rng, noise.psm_rot_deg, noise.psm_trans_mm))


# --------------------------------------------------------------------------
# error reports
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PoseErrorReport:
    """Per-sample pose errors: absolute per-axis and L2 translation (mm), angle (deg).

    Summary statistics use the population standard deviation.
    """

    abs_xyz: np.ndarray
    l2: np.ndarray
    angle_deg: np.ndarray

    @classmethod
    def compare(cls, estimates: Sequence[RigidTransform], truths: Sequence[RigidTransform]) -> "PoseErrorReport":
        if len(estimates) != len(truths):
            raise ValidationError("estimate and truth lists differ in length")
        if not estimates:
            raise ValidationError("at least one sample is required")
        d = np.array([e.translation - g.translation for e, g in zip(estimates, truths)])
        ang = np.array([angular_distance(e.rotation, g.rotation) for e, g in zip(estimates, truths)])
        return cls(np.abs(d), np.linalg.norm(d, axis=1), ang)

    def __len__(self) -> int:
        return len(self.l2)

    def summary(self, prefix: str) -> list[tuple[str, float]]:
        out = []
        for i, axis in enumerate("xyz"):
            out.append((f"{prefix}.abs_{axis}_mm.mean", float(np.mean(self.abs_xyz[:, i]))))
        out += [(f"{prefix}.l2_mm.mean", float(np.mean(self.l2))),
                (f"{prefix}.l2_mm.std", float(np.std(self.l2))),
                (f"{prefix}.angle_deg.mean", float(np.mean(self.angle_deg))),
                (f"{prefix}.angle_deg.std", float(np.std(self.angle_deg)))]
        return out


def evaluate_pose_estimation(world: WorldTruth, traj: Trajectory, state: SessionState,
                             mount_error: RigidTransform | None = None,
                             session: str = "a") -> PoseErrorReport:
    """Camera-frame pose of a marker held by the instrument, estimated vs true.

    The estimate pre-multiplies each recorded scene-frame pose by the left
    registration and appends the nominal PSM-to-marker mount; the truth uses
    the true initial view and the mount perturbed by ``mount_error``.
    """
    if not traj.samples:
        raise ValidationError("at least one sample is required")
    mount_true = compose(world.psm_T_ar, mount_error or RigidTransform())
    view0 = world.initial_view(session, "left")
    est = [compose_all(state.registrations["left"], s.pose, world.psm_T_ar) for s in traj.samples]
    truth = [compose_all(view0, world.tool_state(s.t).pose, mount_true) for s in traj.samples]
    return PoseErrorReport.compare(est, truth)


def evaluate_registration_relative(truth_views: Sequence[RigidTransform],
                                   estimated_views: Sequence[RigidTransform]) -> PoseErrorReport:
    """Scene motion relative to the first (base) pose, estimated vs true.

    Relative motion ``k`` is ``T_0^-1 T_k`` of the camera-from-scene
    transforms; the base pose itself is not scored.
    """
    if len(truth_views) < 2 or len(truth_views) != len(estimated_views):
        raise ValidationError("need at least 2 paired scene poses")
    rel_t = [compose(invert(truth_views[0]), v) for v in truth_views[1:]]
    rel_e = [compose(invert(estimated_views[0]), v) for v in estimated_views[1:]]
    return PoseErrorReport.compare(rel_e, rel_t)


def scene_vertices(samples: Sequence[TrajectorySample], m: InstrumentModel) -> np.ndarray:
    """``(S, V, 3)`` scene-frame vertices of all components, in ``COMPONENTS`` order."""
    out = []
    for smp in samples:
        comps = place_components(smp.pose, smp.joints, m)
        out.append(np.vstack([getattr(comps, name).apply(m.vertices[name]) for name in COMPONENTS]))
    return np.array(out)


def _project_batch(views: Sequence[RigidTransform], pts: np.ndarray, k: CameraIntrinsics):
    rot = np.array([v.rotation_matrix for v in views])
    trans = np.array([v.translation for v in views])
    cam = np.einsum("sij,svj->svi", rot, pts) + trans[:, None, :]
    hom = np.concatenate((cam, np.ones(cam.shape[:2] + (1,))), axis=2)
    inside = np.all(hom @ Frustum.from_intrinsics(k).planes.T > 0.0, axis=2)
    clip = hom @ build_render_matrix(k).T
    with np.errstate(divide="ignore", invalid="ignore"):
        ndc = clip[..., :2] / clip[..., 3:4]
    return ndc, inside


def overlay_errors(world: WorldTruth, traj: Trajectory, state: SessionState, session: str, camera: str,
                   predicted: np.ndarray | None = None, truth: np.ndarray | None = None) -> tuple[np.ndarray, float]:
    """Per-sample mean vertex error (px) and the worst NDC coordinate difference.

    The playback session renders each recorded sample at the ECM pose of the
    same instant in ``session``; truth projects the true tool through the true
    camera view. Only vertices visible in both are compared. ``predicted`` and
    ``truth`` are optional precomputed :func:`scene_vertices` arrays.
    """
    k = world.cameras[camera]
    m = world.instrument
    if predicted is None:
        predicted = scene_vertices(traj.samples, m)
    if truth is None:
        truth = scene_vertices([world.tool_state(s.t) for s in traj.samples], m)
    ecms = [world.sessions[session].ecm_pose(s.t) for s in traj.samples]
    p_ndc, p_in = _project_batch([view_to_scene(state, e, camera) for e in ecms], predicted, k)
    g_ndc, g_in = _project_batch([world.view(session, e, camera) for e in ecms], truth, k)
    both = p_in & g_in
    diff = np.where(both[..., None], p_ndc - g_ndc, 0.0)
    px = np.linalg.norm(diff * [k.width / 2.0, k.height / 2.0], axis=2)
    counts = both.sum(axis=1)
    with np.errstate(invalid="ignore"):
        per_sample = np.where(counts > 0, px.sum(axis=1) / np.maximum(counts, 1), np.nan)
    worst = float(np.max(np.abs(diff))) if both.any() else 0.0
    return per_sample, worst


# --------------------------------------------------------------------------
# scenario spec
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WorldOverrides:
    fmap: FiducialMap | None = None
    cameras: dict = field(default_factory=dict)
    instrument: InstrumentModel | None = None
    tool: Trajectory | None = None
    views: dict = field(default_factory=dict)   # session -> list of camera-from-scene keyframes
    bases: dict = field(default_factory=dict)   # session -> base-from-scene


DEFAULT_STAGES = {"handeye": True, "correction": True, "playback": True, "relative": True}


@dataclass(frozen=True)
class ScenarioSpec:
    """Everything a scenario run depends on besides the seed."""

    name: str = "scenario"
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    preset: str | None = None
    seed: int = 0
    n_seeds: int = 1
    samples: int = 500
    rate_hz: float = 10.0
    frames: int = 10
    detect_thres: int = 10
    ransac_iters: int = 1000
    inlier_px: float = 2.0
    handeye_frames: int = 2
    handeye_train: int = 31
    handeye_test: int = 10
    handeye_angle_deg: float = 1.0
    handeye_trans_mm: float = 2.0
    correction_train: int = 8
    correction_test: int = 8
    correction_inlier_mm: float = 2.0
    relative_poses: int = 29
    stages: dict = field(default_factory=lambda: dict(DEFAULT_STAGES))
    world: WorldOverrides = field(default_factory=WorldOverrides)

    def __post_init__(self):
        positive = ("n_seeds", "samples", "rate_hz", "frames", "detect_thres", "ransac_iters", "inlier_px",
                    "handeye_frames", "handeye_train", "handeye_test", "handeye_angle_deg",
                    "handeye_trans_mm", "correction_train", "correction_test", "correction_inlier_mm")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be positive")
        if self.samples < 2:
            raise ValidationError("a scenario needs at least 2 samples")
        if self.handeye_train < 2:
            raise ValidationError("hand-eye calibration needs at least 2 training motions")
        if self.relative_poses < 2:
            raise ValidationError("relative registration needs at least 2 scene poses")
        unknown = set(self.stages) - set(DEFAULT_STAGES)
        if unknown:
            raise ValidationError(f"unknown stage toggle(s) {sorted(unknown)}")
        object.__setattr__(self, "stages", {**DEFAULT_STAGES, **self.stages})

    @classmethod
    def from_preset(cls, name: str, **kwargs) -> "ScenarioSpec":
        return cls(**{"name": name, "noise": preset(name), "preset": name, **PRESET_CONFIG[name], **kwargs})

    @property
    def duration(self) -> float:
        return (self.samples - 1) / self.rate_hz

    def pnp_config(self) -> RobustConfig:
        return RobustConfig(inlier_threshold=self.inlier_px, max_iterations=self.ransac_iters)

    def header(self) -> list[tuple[str, str]]:
        """Every setting that influences the report, in a fixed order."""
        out = [("scenario", self.name), ("preset", self.preset or "custom")]
        for f in fields(self.noise):
            v = getattr(self.noise, f.name)
            out.append((f"noise.{f.name}", fmt(v) if isinstance(v, float) else str(v)))
        for name in ("seed", "n_seeds", "samples", "rate_hz", "frames", "detect_thres", "ransac_iters",
                     "inlier_px", "handeye_frames", "handeye_train", "handeye_test", "handeye_angle_deg",
                     "handeye_trans_mm", "correction_train", "correction_test", "correction_inlier_mm",
                     "relative_poses"):
            v = getattr(self, name)
            out.append((f"config.{name}", fmt(v) if isinstance(v, float) else str(v)))
        for name in sorted(self.stages):
            out.append((f"stage.{name}", str(self.stages[name]).lower()))
        out.append(("world.custom", str(self.world != WorldOverrides()).lower()))
        return out


def _keyframe_views(items, where: str) -> list[RigidTransform]:
    views = []
    for i, item in enumerate(items):
        pose = item.get("view") if isinstance(item, dict) else None
        if not isinstance(pose, list) or len(pose) != 7:
            raise FormatError(f"{where}[{i}]: expected view = [qw, qx, qy, qz, tx, ty, tz]")
        views.append(RigidTransform.from_array(pose))
    return views


def scenario_from_dict(cfg: dict, base_dir=".", where: str = "scenario") -> ScenarioSpec:
    """Build a spec from a parsed scenario file (see README for the layout)."""
    from .camera import intrinsics_from_dict
    from .instrument import instrument_from_dict
    from .registration import read_fiducial_map

    allowed = {"scenario", "noise", "stages", "world"}
    unknown = set(cfg) - allowed
    if unknown:
        raise FormatError(f"{where}: unknown table(s) {sorted(unknown)}")
    sc = dict(cfg.get("scenario", {}))
    kwargs = {}
    spec_fields = {f.name for f in fields(ScenarioSpec)} - {"noise", "stages", "world", "preset"}
    for key, value in sc.items():
        if key == "preset":
            continue
        if key not in spec_fields:
            raise FormatError(f"{where} [scenario]: unknown field {key!r}")
        kwargs[key] = value
    noise_cfg = dict(cfg.get("noise", {}))
    preset_name = noise_cfg.pop("preset", sc.get("preset"))
    try:
        noise = preset(preset_name) if preset_name else NoiseSpec()
        noise_fields = {f.name for f in fields(NoiseSpec)}
        bad = set(noise_cfg) - noise_fields
        if bad:
            raise FormatError(f"{where} [noise]: unknown field(s) {sorted(bad)}")
        if "occlusion" in noise_cfg:
            noise_cfg["occlusion"] = tuple(tuple(x) for x in noise_cfg["occlusion"])
        noise = replace(noise, **noise_cfg)
        overrides = WorldOverrides()
        w = dict(cfg.get("world", {}))
        if w:
            ov = {}
            if "fiducial_map" in w:
                from pathlib import Path
                ov["fmap"] = read_fiducial_map(Path(base_dir) / w.pop("fiducial_map"))
            if "cameras" in w:
                ov["cameras"] = {c: intrinsics_from_dict(t, f"{where} world.cameras.{c}")
                                 for c, t in w.pop("cameras").items()}
                if set(ov["cameras"]) != set(CAMERAS):
                    raise FormatError(f"{where}: world.cameras needs both 'left' and 'right'")
            if "instrument" in w:
                ov["instrument"] = instrument_from_dict(w.pop("instrument"), base_dir, f"{where} world.instrument")
            if "tool_keyframes" in w:
                samples = []
                for i, item in enumerate(w.pop("tool_keyframes")):
                    try:
                        samples.append(TrajectorySample(float(item["t"]), RigidTransform.from_array(item["pose"]),
                                                        JointState(*item["joints"]), INSTRUMENT_ID))
                    except (KeyError, TypeError) as exc:
                        raise FormatError(f"{where} world.tool_keyframes[{i}]: {exc}") from exc
                if len(samples) < 2:
                    raise FormatError(f"{where}: tool_keyframes needs at least 2 entries")
                ov["tool"] = Trajectory(samples)
            for s in SESSIONS:
                key = f"views_{s}"
                if key in w:
                    views = _keyframe_views(w.pop(key), f"{where} world.{key}")
                    if len(views) < 2:
                        raise FormatError(f"{where}: world.{key} needs at least 2 entries")
                    ov.setdefault("views", {})[s] = views
                key = f"base_{s}"
                if key in w:
                    ov.setdefault("bases", {})[s] = RigidTransform.from_array(w.pop(key))
            if w:
                raise FormatError(f"{where} [world]: unknown field(s) {sorted(w)}")
            overrides = WorldOverrides(**ov)
        if preset_name:
            kwargs = {**PRESET_CONFIG[preset_name], **kwargs}
        return ScenarioSpec(noise=noise, preset=preset_name, stages=dict(cfg.get("stages", {})),
                            world=overrides, **kwargs)
    except (ValidationError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{where}: {exc}") from exc


def read_scenario(path) -> ScenarioSpec:
    from pathlib import Path
    return scenario_from_dict(load_toml(path), Path(path).parent, str(path))


# --------------------------------------------------------------------------
# scenario run
# --------------------------------------------------------------------------

@dataclass
class ScenarioResult:
    """Metrics of one seed plus the intermediate products used for plots."""

    seed: int
    metrics: list                        # [(key, value)] in a fixed order
    trajectory: Trajectory | None = None
    session_a: SessionState | None = None
    session_b: SessionState | None = None
    pose_report: PoseErrorReport | None = None
    relative_report: PoseErrorReport | None = None
    overlay_px: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return dict(self.metrics)


def _register(world, camera, spec, noise, rng, view, session, frames=None):
    batches = observe_frames(world, camera, frames or spec.frames, noise, rng, view, session)
    return register_scene(batches, world.fmap, world.cameras[camera], spec.pnp_config(),
                          n_frame_thres=frames or spec.frames, n_detect_thres=spec.detect_thres)


def _calibrate_handeye(world, spec, noise, rng, metrics):
    """Per camera: register at random ECM poses, solve on train motions, score on test motions."""
    n_train, n_test = spec.handeye_train + 1, spec.handeye_test + 1
    # an ECM cannot spin the scope freely; near-180 deg motions also make the
    # dual-quaternion sign pairing ambiguous under noise
    roll0 = rng.uniform(0.0, 360.0)
    views = [random_view(rng, world.board_centre, depth=(110.0, 230.0), tilt_deg=30.0,
                         roll_deg=(roll0 - 40.0, roll0 + 40.0)) for _ in range(n_train + n_test)]
    ecm_true = [world.ecm_for_view("a", v) for v in views]
    ecm_read = [compose(e, pose_noise(rng, noise.ecm_rot_deg, noise.ecm_trans_mm)) for e in ecm_true]
    cfg = RobustConfig(inlier_threshold=spec.handeye_trans_mm, angle_threshold_deg=spec.handeye_angle_deg,
                       max_iterations=spec.ransac_iters)
    estimates = {}
    for camera in CAMERAS:
        cams = [_register(world, camera, spec, noise, rng, world.view("a", e, camera), "a", spec.handeye_frames)
                for e in ecm_true]
        train = build_motion_pairs(cams[:n_train], ecm_read[:n_train])
        test = build_motion_pairs(cams[n_train:], ecm_read[n_train:])
        x, rep = solve_handeye(train, cfg, return_report=True)
        he = invert(x)
        estimates[camera] = he
        trans, rot = motion_prediction_errors(x, test)
        dt, dr = pose_distance(he, world.handeye[camera])
        metrics += [(f"handeye.{camera}.test.l2_mm.mean", float(np.mean(trans))),
                    (f"handeye.{camera}.test.l2_mm.std", float(np.std(trans))),
                    (f"handeye.{camera}.test.angle_deg.mean", float(np.mean(rot))),
                    (f"handeye.{camera}.test.angle_deg.std", float(np.std(rot))),
                    (f"handeye.{camera}.truth.trans_mm", dt),
                    (f"handeye.{camera}.truth.rot_deg", dr),
                    (f"handeye.{camera}.inliers", int(rep.inliers.sum()))]
    return estimates


def _fit_correction(world, spec, noise, rng, reg_left, he_left, metrics):
    """Touch board points with the tool tip at the initial ECM pose and fit the correction."""
    corners = np.vstack([world.fmap[label] for label in world.fmap.labels()])
    n = spec.correction_train + spec.correction_test
    order = rng.permutation(len(corners))
    picks = [corners[order[i % len(corners)]] for i in range(n)]
    ecm0 = world.sessions["a"].ecm_poses[0]
    actual, reported = [], []
    for p in picks:
        tip = RigidTransform(_tool_orientation(rng).rotation, p)
        rep = reported_psm_pose(world, world.sessions["a"].ecm_times[0], noise, rng, "a", tip, ecm0)
        actual.append(reg_left.apply(p))
        reported.append(invert(he_left).apply(rep.translation))
    actual, reported = np.array(actual), np.array(reported)
    k = spec.correction_train
    train = PointPairSet(actual[:k], reported[:k])
    cfg = RobustConfig(inlier_threshold=spec.correction_inlier_mm, max_iterations=spec.ransac_iters)
    t_cor = fit_correction(train, cfg)
    err = np.linalg.norm(t_cor.apply(reported[k:]) - actual[k:], axis=1)
    dt, dr = pose_distance(t_cor, world.corrections[INSTRUMENT_ID])
    metrics += [("correction.test.l2_mm.mean", float(np.mean(err))),
                ("correction.test.l2_mm.std", float(np.std(err))),
                ("correction.truth.trans_mm", dt),
                ("correction.truth.rot_deg", dr)]
    return t_cor


def _relative_registration(world, spec, noise, rng, metrics):
    """Camera fixed at the initial view; the board is moved and re-registered."""
    view0 = world.initial_view("a", "left")
    centre = world.board_centre
    about_centre = RigidTransform.from_translation(centre)
    truth = [view0]
    for _ in range(spec.relative_poses - 1):
        d = compose_all(about_centre, RigidTransform.from_rotvec(
            rng.normal(0, math.radians(8.0), 3), rng.uniform(-15, 15, 3)), invert(about_centre))
        truth.append(compose(view0, d))
    est = [_register(world, "left", spec, noise, rng, v, "a") for v in truth]
    report = evaluate_registration_relative(truth, est)
    metrics += report.summary("registration.relative")
    return report


def run_scenario(spec: ScenarioSpec, seed: int | None = None) -> ScenarioResult:
    """register -> calibrate -> fit correction -> record -> re-register -> play back -> evaluate."""
    seed = spec.seed if seed is None else seed
    noise = replace(spec.noise, seed=seed)
    world = make_world(seed, spec.duration, spec)
    metrics: list = [("seed", seed)]

    # scene registration for recording (session a), both cameras
    rng = stage_rng(seed, "registration")
    regs_a = {c: _register(world, c, spec, noise, rng, None, "a") for c in CAMERAS}
    for c in CAMERAS:
        dt, dr = pose_distance(regs_a[c], world.initial_view("a", c))
        metrics += [(f"registration.{c}.trans_mm", dt), (f"registration.{c}.rot_deg", dr)]

    if spec.stages["handeye"]:
        handeye = _calibrate_handeye(world, spec, noise, stage_rng(seed, "handeye"), metrics)
    else:
        handeye = dict(world.handeye)

    if spec.stages["correction"]:
        t_cor = _fit_correction(world, spec, noise, stage_rng(seed, "correction"), regs_a["left"],
                                handeye["left"], metrics)
    else:
        t_cor = world.corrections[INSTRUMENT_ID]

    sess_a = world.sessions["a"]
    state_a = SessionState(regs_a, handeye, sess_a.ecm_poses[0], {INSTRUMENT_ID: t_cor}, sess_a.ecm_times[0])

    # record
    rng = stage_rng(seed, "record")
    traj = Trajectory(session=state_a, metadata={"scenario": spec.name, "seed": str(seed)})
    times = world.t0 + np.arange(spec.samples) / spec.rate_hz
    prev = None
    for t in times:
        t = float(t)
        truth = world.tool_state(t)
        reported = reported_psm_pose(world, t, noise, rng, "a")
        smp = record_sample(state_a, sess_a.ecm_pose(t), reported, truth.joints, t, INSTRUMENT_ID, prev)
        traj.append(smp)
        prev = t
    mount = pose_noise(rng, noise.mount_rot_deg, noise.mount_trans_mm)
    pose_report = evaluate_pose_estimation(world, traj, state_a, mount, "a")
    metrics += pose_report.summary("pose")
    metrics.append(("record.samples", len(traj)))

    result = ScenarioResult(seed, metrics, traj, state_a, pose_report=pose_report)

    if spec.stages["playback"]:
        rng = stage_rng(seed, "playback")
        sess_b = world.sessions["b"]
        regs_b = {c: _register(world, c, spec, noise, rng, None, "b") for c in CAMERAS}
        for c in CAMERAS:
            dt, dr = pose_distance(regs_b[c], world.initial_view("b", c))
            metrics += [(f"registration.b.{c}.trans_mm", dt), (f"registration.b.{c}.rot_deg", dr)]
        state_b = SessionState(regs_b, handeye, sess_b.ecm_poses[0], {INSTRUMENT_ID: t_cor}, sess_b.ecm_times[0])
        result.session_b = state_b
        predicted = scene_vertices(traj.samples, world.instrument)
        truth = scene_vertices([world.tool_state(s.t) for s in traj.samples], world.instrument)
        for label, session, state in (("same", "a", state_a), ("cross", "b", state_b)):
            worst_all, means = 0.0, []
            for c in CAMERAS:
                px, worst = overlay_errors(world, traj, state, session, c, predicted, truth)
                result.overlay_px[(label, c)] = px
                worst_all = max(worst_all, worst)
                means.append(float(np.nanmean(px)))
                metrics.append((f"overlay.{label}.{c}.px_mean", means[-1]))
            metrics += [(f"overlay.{label}.px_mean", float(np.mean(means))),
                        (f"overlay.{label}.ndc_max", worst_all)]

    if spec.stages["relative"]:
        result.relative_report = _relative_registration(world, spec, noise, stage_rng(seed, "relative"), metrics)
    return result


def run_monte_carlo(spec: ScenarioSpec, seeds: Sequence[int] | None = None, workers: int = 1) -> list[ScenarioResult]:
    """Independent seeds, optionally in worker processes; results in seed order."""
    seeds = list(seeds) if seeds is not None else [spec.seed + i for i in range(spec.n_seeds)]
    if workers <= 1 or len(seeds) == 1:
        return [run_scenario(spec, s) for s in seeds]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_scenario, [spec] * len(seeds), seeds))


def aggregate(results: Sequence[ScenarioResult]) -> list[tuple[str, float]]:
    """Per-metric median, mean, std and 95th percentile across seeds."""
    keys = [k for k, _ in results[0].metrics if k != "seed"]
    out = []
    for key in keys:
        vals = np.array([float(r.as_dict()[key]) for r in results])
        out += [(f"{key}.median", float(np.median(vals))), (f"{key}.mean", float(np.mean(vals))),
                (f"{key}.std", float(np.std(vals))), (f"{key}.p95", float(np.percentile(vals, 95)))]
    return out


def format_report(spec: ScenarioSpec, results: Sequence[ScenarioResult]) -> str:
    """Key-value report: reproducibility header, per-seed metrics, then aggregates."""
    lines = ["# arplayback evaluation report"]
    lines += [f"{k} = {v}" for k, v in spec.header()]
    lines.append(f"seeds = {' '.join(str(r.seed) for r in results)}")
    for r in results:
        for key, value in r.metrics:
            if key == "seed":
                continue
            lines.append(f"seed.{r.seed}.{key} = {fmt(value) if isinstance(value, float) else value}")
    if len(results) > 1:
        lines += [f"all.{k} = {fmt(v)}" for k, v in aggregate(results)]
    return "\n".join(lines) + "\n"
