"""Setup-invariant record and playback transform chains.

Recording maps the API-reported PSM pose into the task (scene) frame using the
initial left-camera registration, the kinematic correction, the hand-eye
transform and the ECM motion since registration. Playback re-derives each
camera's view of the scene from the *playback* session's registration and
ECM motion, so the recorded motion lands on the task regardless of where the
robots were set up.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .camera import CameraIntrinsics, Frustum, build_render_matrix, to_ndc
from .errors import FormatError, ValidationError
from .geometry import GeometryError, RigidTransform, compose, compose_all, interpolate, invert
from .instrument import COMPONENTS, ComponentPoses, InstrumentModel, JointState, place_components
from .textio import fmt, fmt_values, parse_floats, read_text

CAMERAS = ("left", "right")


@dataclass(frozen=True)
class SessionState:
    """Calibration and registration products of one session.

    ``registrations[c]`` is camera-from-scene at registration time,
    ``handeye[c]`` is ECM-from-camera, ``corrections[i]`` the correction for
    instrument ``i`` (acting in the initial left-camera frame) and
    ``initial_ecm`` the base-from-ECM pose at registration.
    """

    registrations: dict
    handeye: dict
    initial_ecm: RigidTransform
    corrections: dict = field(default_factory=dict)
    registered_at: float = 0.0

    def correction(self, instrument_id: str) -> RigidTransform:
        return self.corrections.get(instrument_id, RigidTransform())


@dataclass(frozen=True)
class TrajectorySample:
    t: float
    pose: RigidTransform
    joints: JointState
    instrument_id: str = "PSM1"


@dataclass
class Trajectory:
    """Time-ordered samples of one instrument plus the recording session."""

    samples: list = field(default_factory=list)
    session: SessionState | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = list(self.samples)
        self._times = [s.t for s in self.samples]
        ts = self._times
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValidationError("trajectory timestamps must be strictly increasing")

    def append(self, sample: TrajectorySample) -> None:
        if self.samples and sample.t <= self.samples[-1].t:
            raise ValidationError(f"sample at t={sample.t} does not follow t={self.samples[-1].t}")
        self.samples.append(sample)
        self._times.append(sample.t)

    @property
    def times(self) -> list[float]:
        return self._times

    @property
    def duration(self) -> float:
        return self.samples[-1].t - self.samples[0].t if self.samples else 0.0

    def __len__(self) -> int:
        return len(self.samples)


def ecm_motion(state: SessionState, current_ecm: RigidTransform) -> RigidTransform:
    """ECM motion since registration: ``E_i^-1 E``."""
    return compose(invert(state.initial_ecm), current_ecm)


def record_sample(state: SessionState, current_ecm: RigidTransform, reported_psm: RigidTransform,
                  joints: JointState, t: float, instrument_id: str = "PSM1",
                  previous_t: float | None = None) -> TrajectorySample:
    """Scene-from-PSM pose for one API reading (left camera is the reference)."""
    if t < state.registered_at:
        raise ValidationError("sample recorded before scene registration")
    if previous_t is not None and t <= previous_t:
        raise ValidationError(f"non-monotone timestamp {t} after {previous_t}")
    pose = compose_all(
        invert(state.registrations["left"]),
        state.correction(instrument_id),
        invert(state.handeye["left"]),
        ecm_motion(state, current_ecm),
        reported_psm,
    )
    return TrajectorySample(float(t), pose, joints, instrument_id)


def view_to_scene(state: SessionState, current_ecm: RigidTransform, camera: str = "left") -> RigidTransform:
    """Current camera-from-scene transform after ECM motion."""
    if camera not in state.registrations or camera not in state.handeye:
        raise ValidationError(f"session has no calibration for camera {camera!r}")
    x = state.handeye[camera]
    return compose_all(invert(x), invert(ecm_motion(state, current_ecm)), x, state.registrations[camera])


def component_camera_points(components: ComponentPoses, view: RigidTransform,
                            m: InstrumentModel) -> dict[str, np.ndarray]:
    return {name: compose(view, getattr(components, name)).apply(m.vertices[name]) for name in COMPONENTS}


def project_components(points: dict[str, np.ndarray], k: CameraIntrinsics) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """NDC ``(x, y)`` of every vertex plus its visibility mask, per component."""
    render = build_render_matrix(k)
    frustum = Frustum.from_intrinsics(k)
    out = {}
    for name, pts in points.items():
        mask = frustum.contains(pts)
        ndc = np.full((len(pts), 2), np.nan)
        if mask.any():
            ndc[mask] = to_ndc(render, pts[mask])[:, :2]
        out[name] = (ndc, mask)
    return out


def render_overlay(sample: TrajectorySample, state: SessionState, current_ecm: RigidTransform,
                   m: InstrumentModel, k: CameraIntrinsics, camera: str = "left") -> dict[str, np.ndarray]:
    """Normalized image coordinates of the visible vertices of each component."""
    components = place_components(sample.pose, sample.joints, m)
    view = view_to_scene(state, current_ecm, camera)
    projected = project_components(component_camera_points(components, view, m), k)
    return {name: ndc[mask] for name, (ndc, mask) in projected.items()}


def _interpolate_samples(a: TrajectorySample, b: TrajectorySample, t: float) -> TrajectorySample:
    s = (t - a.t) / (b.t - a.t)
    ja, jb = a.joints.as_array(), b.joints.as_array()
    j = (1.0 - s) * ja + s * jb
    return TrajectorySample(t, interpolate(a.pose, b.pose, s), JointState(*j), a.instrument_id)


def playback_iter(traj: Trajectory, speed: float, clock: float) -> TrajectorySample:
    """Sample shown ``clock`` seconds into playback at ``speed`` x real time.

    Pose is slerp/lerp-interpolated between the bracketing samples and clamped
    to the trajectory ends.
    """
    if speed <= 0:
        raise ValidationError("playback speed must be positive")
    if clock < 0:
        raise ValidationError("playback clock must be non-negative")
    if not traj.samples:
        raise ValidationError("empty trajectory")
    samples = traj.samples
    t = samples[0].t + speed * clock
    if t >= samples[-1].t:
        return samples[-1]
    times = traj.times
    i = bisect.bisect_right(times, t) - 1
    if times[i] == t:
        return samples[i]
    return _interpolate_samples(samples[i], samples[i + 1], t)


def playback_stream(traj: Trajectory, speed: float = 1.0, rate_hz: float = 30.0) -> Iterator[tuple[float, TrajectorySample]]:
    """``(wall_clock, sample)`` pairs covering the trajectory at ``rate_hz``."""
    if rate_hz <= 0:
        raise ValidationError("rate must be positive")
    wall = traj.duration / speed
    n = int(np.floor(wall * rate_hz + 1e-9))
    for i in range(n + 1):
        clock = i / rate_hz
        yield clock, playback_iter(traj, speed, clock)
    if n / rate_hz < wall:
        yield wall, playback_iter(traj, speed, wall)


# --------------------------------------------------------------------------
# trajectory file
# --------------------------------------------------------------------------
# Header lines start with "#":
#   # arplayback-trajectory 1
#   # registered_at <t>
#   # initial_ecm <qw qx qy qz tx ty tz>
#   # registration <camera> <7 numbers>      camera-from-scene
#   # handeye <camera> <7 numbers>           ECM-from-camera
#   # correction <instrument_id> <7 numbers>
#   # meta <key> <free text>
#   # columns t qw qx qy qz tx ty tz q6 q7 thetaJ instrument_id
# then one record per line:
#   t qw qx qy qz tx ty tz q6 q7 thetaJ instrument_id
# Numbers are written with the shortest round-trip representation, so
# write -> read -> write reproduces the file byte for byte.

TRAJECTORY_MAGIC = "arplayback-trajectory"
TRAJECTORY_VERSION = 1
COLUMNS = "t qw qx qy qz tx ty tz q6 q7 thetaJ instrument_id"


def _token(name: str, what: str) -> str:
    if not name or any(c.isspace() for c in name) or "#" in name:
        raise ValidationError(f"{what} {name!r} must be a non-empty token without spaces or '#'")
    return name


def _ordered(d: dict) -> list:
    return sorted(d, key=lambda c: (CAMERAS.index(c) if c in CAMERAS else len(CAMERAS), c))


def format_trajectory(traj: Trajectory) -> str:
    lines = [f"# {TRAJECTORY_MAGIC} {TRAJECTORY_VERSION}"]
    st = traj.session
    if st is not None:
        lines.append(f"# registered_at {fmt(st.registered_at)}")
        lines.append(f"# initial_ecm {fmt_values(st.initial_ecm.as_array())}")
        for cam in _ordered(st.registrations):
            lines.append(f"# registration {_token(cam, 'camera')} {fmt_values(st.registrations[cam].as_array())}")
        for cam in _ordered(st.handeye):
            lines.append(f"# handeye {_token(cam, 'camera')} {fmt_values(st.handeye[cam].as_array())}")
        for inst in sorted(st.corrections):
            lines.append(f"# correction {_token(inst, 'instrument id')} {fmt_values(st.corrections[inst].as_array())}")
    for key, value in traj.metadata.items():
        value = str(value)
        if "\n" in value:
            raise ValidationError("metadata values must be single-line")
        lines.append(f"# meta {_token(key, 'metadata key')} {value}".rstrip())
    lines.append(f"# columns {COLUMNS}")
    for smp in traj.samples:
        j = smp.joints
        lines.append(f"{fmt(smp.t)} {fmt_values(smp.pose.as_array())} "
                     f"{fmt(j.q6)} {fmt(j.q7)} {fmt(j.theta_j)} {_token(smp.instrument_id, 'instrument id')}")
    return "\n".join(lines) + "\n"


def write_trajectory(path, traj: Trajectory) -> None:
    if not traj.samples:
        raise ValidationError("refusing to write an empty trajectory")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_trajectory(traj))


def _pose(tokens, where: str) -> RigidTransform:
    if len(tokens) != 7:
        raise FormatError(f"{where}: expected 7 pose numbers, got {len(tokens)}")
    values = parse_floats(tokens, where)
    if abs(np.linalg.norm(values[:4]) - 1.0) > 1e-6:
        raise FormatError(f"{where}: quaternion is not unit length")
    try:
        return RigidTransform.from_array(values)
    except GeometryError as exc:
        raise FormatError(f"{where}: {exc}") from exc


def parse_trajectory(text: str, source: str = "<trajectory>") -> Trajectory:
    lines = text.splitlines()
    if not lines or lines[0].split()[:2] != ["#", TRAJECTORY_MAGIC]:
        raise FormatError(f"{source}:1: missing '# {TRAJECTORY_MAGIC}' header")
    head = lines[0].split()
    if len(head) != 3 or head[2] != str(TRAJECTORY_VERSION):
        raise FormatError(f"{source}:1: unsupported trajectory version")
    registered_at, initial = 0.0, None
    regs, hes, cors, meta = {}, {}, {}, {}
    samples = []
    for n, raw in enumerate(lines[1:], start=2):
        where = f"{source}:{n}"
        if not raw.strip():
            continue
        if raw.startswith("#"):
            tok = raw[1:].split()
            if not tok:
                continue
            kind = tok[0]
            if kind == "registered_at" and len(tok) == 2:
                registered_at = parse_floats(tok[1:], where)[0]
            elif kind == "initial_ecm":
                initial = _pose(tok[1:], where)
            elif kind in ("registration", "handeye", "correction") and len(tok) >= 2:
                {"registration": regs, "handeye": hes, "correction": cors}[kind][tok[1]] = _pose(tok[2:], where)
            elif kind == "meta" and len(tok) >= 2:
                rest = raw[1:].lstrip()[len("meta"):].lstrip()[len(tok[1]):]
                meta[tok[1]] = rest[1:] if rest.startswith(" ") else rest
            elif kind == "columns":
                if " ".join(tok[1:]) != COLUMNS:
                    raise FormatError(f"{where}: unexpected column layout")
            else:
                raise FormatError(f"{where}: unrecognised header line")
            continue
        tok = raw.split()
        if len(tok) != 12:
            raise FormatError(f"{where}: expected 12 fields, got {len(tok)}")
        values = parse_floats(tok[:11], where)
        try:
            joints = JointState(*values[8:11])
        except ValidationError as exc:
            raise FormatError(f"{where}: {exc}") from exc
        samples.append(TrajectorySample(values[0], _pose(tok[1:8], where), joints, tok[11]))
    if not samples:
        raise FormatError(f"{source}: trajectory has no samples")
    session = None
    if initial is not None:
        if "left" not in regs or "left" not in hes:
            raise FormatError(f"{source}: session header lacks left-camera registration or hand-eye")
        session = SessionState(regs, hes, initial, cors, registered_at)
    elif regs or hes or cors:
        raise FormatError(f"{source}: session header lacks initial_ecm")
    try:
        return Trajectory(samples, session, meta)
    except ValidationError as exc:
        raise FormatError(f"{source}: {exc}") from exc


def read_trajectory(path) -> Trajectory:
    return parse_trajectory(read_text(path), str(path))


# --------------------------------------------------------------------------
# recording input and playback output
# --------------------------------------------------------------------------
# API readings (input to recording), one per line:
#   t  ecm(qw qx qy qz tx ty tz)  psm(qw qx qy qz tx ty tz)  q6 q7 thetaJ  instrument_id
# with ecm = base-from-ECM and psm = ECM-from-PSM as reported by the robot.
# Timed pose stream (ECM poses during playback), one per line:
#   t qw qx qy qz tx ty tz

@dataclass(frozen=True)
class Reading:
    t: float
    ecm: RigidTransform
    psm: RigidTransform
    joints: JointState
    instrument_id: str = "PSM1"


def parse_readings(text: str, source: str = "<readings>") -> list[Reading]:
    out = []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{n}"
        tok = line.split()
        if len(tok) != 19:
            raise FormatError(f"{where}: expected 19 fields, got {len(tok)}")
        values = parse_floats(tok[:18], where)
        try:
            joints = JointState(*values[15:18])
        except ValidationError as exc:
            raise FormatError(f"{where}: {exc}") from exc
        out.append(Reading(values[0], _pose(tok[1:8], where), _pose(tok[8:15], where), joints, tok[18]))
    if not out:
        raise FormatError(f"{source}: no readings")
    return out


def read_readings(path) -> list[Reading]:
    return parse_readings(read_text(path), str(path))


def format_readings(readings) -> str:
    lines = ["# t ecm(qw qx qy qz tx ty tz) psm(qw qx qy qz tx ty tz) q6 q7 thetaJ instrument_id"]
    for r in readings:
        j = r.joints
        lines.append(f"{fmt(r.t)} {fmt_values(r.ecm.as_array())} {fmt_values(r.psm.as_array())} "
                     f"{fmt(j.q6)} {fmt(j.q7)} {fmt(j.theta_j)} {_token(r.instrument_id, 'instrument id')}")
    return "\n".join(lines) + "\n"


def parse_timed_poses(text: str, source: str = "<poses>") -> tuple[list[float], list[RigidTransform]]:
    times, poses = [], []
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{n}"
        tok = line.split()
        if len(tok) != 8:
            raise FormatError(f"{where}: expected t and 7 pose numbers, got {len(tok)} fields")
        t = parse_floats(tok[:1], where)[0]
        if times and t <= times[-1]:
            raise FormatError(f"{where}: timestamps must increase")
        times.append(t)
        poses.append(_pose(tok[1:], where))
    if not poses:
        raise FormatError(f"{source}: no poses")
    return times, poses


def read_timed_poses(path) -> tuple[list[float], list[RigidTransform]]:
    return parse_timed_poses(read_text(path), str(path))


def format_timed_poses(times, poses) -> str:
    lines = ["# t qw qx qy qz tx ty tz"]
    lines += [f"{fmt(t)} {fmt_values(p.as_array())}" for t, p in zip(times, poses)]
    return "\n".join(lines) + "\n"


def pose_at(times: list[float], poses: list[RigidTransform], t: float) -> RigidTransform:
    """Slerp/lerp lookup in a timed pose stream, clamped at both ends."""
    if t <= times[0]:
        return poses[0]
    if t >= times[-1]:
        return poses[-1]
    i = bisect.bisect_right(times, t) - 1
    return interpolate(poses[i], poses[i + 1], (t - times[i]) / (times[i + 1] - times[i]))


def record(state: SessionState, readings, metadata: dict | None = None) -> Trajectory:
    """Run every reading through the recording chain."""
    traj = Trajectory(session=state, metadata=dict(metadata or {}))
    prev = None
    for r in readings:
        traj.append(record_sample(state, r.ecm, r.psm, r.joints, r.t, r.instrument_id, prev))
        prev = r.t
    return traj


def format_overlay_stream(frames, speed: float, rate_hz: float, wall_duration: float) -> str:
    """Overlay stream text.

    ``frames`` yields ``(wall_clock, t, camera, component, ndc (N, 2))``. The
    header carries the wall-clock duration of the whole stream.
    """
    lines = ["# arplayback-overlay 1",
             f"# speed {fmt(speed)}",
             f"# rate_hz {fmt(rate_hz)}",
             f"# wall_clock_duration {fmt(wall_duration)}",
             "# columns wall_clock t camera component n x1 y1 ... xn yn"]
    for wall, t, camera, component, ndc in frames:
        coords = fmt_values(np.asarray(ndc).reshape(-1))
        lines.append(f"{fmt(wall)} {fmt(t)} {camera} {component} {len(ndc)}" + (f" {coords}" if len(ndc) else ""))
    return "\n".join(lines) + "\n"
