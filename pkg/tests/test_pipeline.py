import math
import time

import numpy as np
import pytest

from arplayback.camera import project_points
from arplayback.errors import FormatError, ValidationError
from arplayback.geometry import RigidTransform, angular_distance, compose, compose_all, invert, random_transform
from arplayback.instrument import COMPONENTS, JointState, place_components
from arplayback.pipeline import (SessionState, Trajectory, TrajectorySample, ecm_motion, format_readings,
                                 format_timed_poses, format_trajectory, parse_readings, parse_timed_poses,
                                 parse_trajectory, playback_iter, playback_stream, pose_at, read_trajectory,
                                 record, record_sample, render_overlay, view_to_scene, write_trajectory, Reading)
from arplayback.simulator import INSTRUMENT_ID, NoiseSpec, make_world, reported_psm_pose
from helpers import assert_pose_close

I = RigidTransform()
J0 = JointState(0.0, 0.0, 0.0)


def trivial_state(**kw):
    base = dict(registrations={"left": I, "right": I}, handeye={"left": I, "right": I}, initial_ecm=I)
    base.update(kw)
    return SessionState(**base)


def true_state(world, session="a"):
    st = world.sessions[session]
    regs = {c: world.initial_view(session, c) for c in ("left", "right")}
    return SessionState(regs, dict(world.handeye), st.ecm_poses[0], dict(world.corrections), st.ecm_times[0])


@pytest.fixture(scope="module")
def world():
    return make_world(7, duration=20.0)


# ecm_motion -----------------------------------------------------------------

def test_ecm_motion_examples():
    rng = np.random.default_rng(0)
    init = random_transform(rng)
    assert_pose_close(ecm_motion(trivial_state(initial_ecm=init), init), I)
    moved = ecm_motion(trivial_state(), RigidTransform.from_translation([0, 0, 10]))
    assert_pose_close(moved, RigidTransform.from_translation([0, 0, 10]), 0.0, 0.0)
    for _ in range(50):
        init, cur = random_transform(rng, 300.0), random_transform(rng, 300.0)
        assert_pose_close(compose(init, ecm_motion(trivial_state(initial_ecm=init), cur)), cur, 1e-9, 1e-9)


# record_sample --------------------------------------------------------------

def test_record_sample_identity_and_pass_through():
    assert_pose_close(record_sample(trivial_state(), I, I, J0, 0.0).pose, I, 0.0, 0.0)
    t = random_transform(np.random.default_rng(1))
    assert_pose_close(record_sample(trivial_state(), I, t, J0, 0.0).pose, t, 1e-12, 1e-12)


def test_record_sample_rejects_bad_timestamps():
    with pytest.raises(ValidationError):
        record_sample(trivial_state(), I, I, J0, 1.0, previous_t=1.0)
    with pytest.raises(ValidationError):
        record_sample(trivial_state(), I, I, J0, 0.5, previous_t=2.0)
    with pytest.raises(ValidationError):
        record_sample(trivial_state(registered_at=5.0), I, I, J0, 4.0)
    traj = Trajectory([TrajectorySample(1.0, I, J0)])
    with pytest.raises(ValidationError):
        traj.append(TrajectorySample(1.0, I, J0))


def test_record_sample_matches_simulator_truth(world):
    state = true_state(world)
    sess = world.sessions["a"]
    for t in np.linspace(world.t0, world.t_end, 41):
        reported = reported_psm_pose(world, t, NoiseSpec())
        smp = record_sample(state, sess.ecm_pose(t), reported, J0, t, INSTRUMENT_ID)
        assert_pose_close(smp.pose, world.tool_state(t).pose, 1e-9, 1e-9)


def test_recorded_pose_in_camera_matches_direct_kinematics(world):
    # view chain applied to the recorded pose == hand-eye^-1 * API pose (uncorrupted)
    state = true_state(world)
    sess = world.sessions["a"]
    for t in np.linspace(world.t0, world.t_end, 11):
        ecm = sess.ecm_pose(t)
        smp = record_sample(state, ecm, reported_psm_pose(world, t, NoiseSpec()), J0, t, INSTRUMENT_ID)
        true_ecm_psm = compose_all(invert(ecm), sess.base_T_scene, world.tool_state(t).pose)
        direct = compose(invert(world.handeye["left"]), true_ecm_psm)
        assert_pose_close(compose(view_to_scene(state, ecm), smp.pose), direct, 1e-9, 1e-9)


# view_to_scene ----------------------------------------------------------------

def test_view_to_scene_examples():
    rng = np.random.default_rng(2)
    reg, init, x = random_transform(rng), random_transform(rng, 200.0), random_transform(rng)
    st = trivial_state(registrations={"left": reg}, handeye={"left": x}, initial_ecm=init)
    assert_pose_close(view_to_scene(st, init), reg, 1e-9, 1e-9)
    cur = random_transform(rng, 200.0)
    st = trivial_state(registrations={"left": reg}, initial_ecm=init)
    assert_pose_close(view_to_scene(st, cur), compose(invert(ecm_motion(st, cur)), reg), 1e-9, 1e-9)
    with pytest.raises(ValidationError):
        view_to_scene(st, cur, "right")


def test_view_to_scene_projects_like_truth(world):
    state = true_state(world)
    rng = np.random.default_rng(3)
    pts = np.vstack([world.fmap[label] for label in world.fmap.labels()])
    sess = world.sessions["a"]
    for _ in range(20):
        ecm = compose(sess.ecm_pose(rng.uniform(world.t0, world.t_end)),
                      RigidTransform.from_rotvec(rng.normal(0, 0.05, 3), rng.normal(0, 5, 3)))
        for cam in ("left", "right"):
            k = world.cameras[cam]
            got = project_points(k, view_to_scene(state, ecm, cam).apply(pts))
            want = project_points(k, world.view("a", ecm, cam).apply(pts))
            np.testing.assert_allclose(got, want, atol=1e-9)


# render_overlay -------------------------------------------------------------

def test_render_overlay_behind_camera(world):
    behind = TrajectorySample(0.0, RigidTransform.from_translation([0, 0, -150.0]), J0)
    out = render_overlay(behind, trivial_state(), I, world.instrument, world.cameras["left"])
    assert set(out) == set(COMPONENTS)
    assert all(len(v) == 0 for v in out.values())


def _direct_ndc(world, session, ecm, camera, tool):
    k = world.cameras[camera]
    from arplayback.camera import build_render_matrix, to_ndc, Frustum
    view = world.view(session, ecm, camera)
    comps = place_components(tool.pose, tool.joints, world.instrument)
    out = {}
    for name in COMPONENTS:
        pc = compose(view, getattr(comps, name)).apply(world.instrument.vertices[name])
        pc = pc[Frustum.from_intrinsics(k).contains(pc)]
        out[name] = to_ndc(build_render_matrix(k), pc)[:, :2] if len(pc) else np.empty((0, 2))
    return out


@pytest.mark.parametrize("playback_session", ["a", "b"])
def test_overlay_round_trip_and_setup_invariance(world, playback_session):
    rec = true_state(world, "a")
    play = true_state(world, playback_session)
    sess_a, sess_p = world.sessions["a"], world.sessions[playback_session]
    shown = 0
    for t in np.linspace(world.t0, world.t_end, 15):
        smp = record_sample(rec, sess_a.ecm_pose(t), reported_psm_pose(world, t, NoiseSpec()),
                            world.tool_state(t).joints, t, INSTRUMENT_ID)
        ecm = sess_p.ecm_pose(t)
        for cam in ("left", "right"):
            got = render_overlay(smp, play, ecm, world.instrument, world.cameras[cam], cam)
            want = _direct_ndc(world, playback_session, ecm, cam, world.tool_state(t))
            for name in COMPONENTS:
                assert got[name].shape == want[name].shape
                if len(got[name]):
                    assert np.max(np.abs(got[name] - want[name])) < 1e-6
                    shown += 1
    assert shown > 0


# playback -------------------------------------------------------------------

def _two_sample(angle=90.0):
    return Trajectory([TrajectorySample(0.0, I, JointState(0.0, 0.0, 0.0)),
                       TrajectorySample(2.0, RigidTransform.from_axis_angle([0, 0, 1], angle, [10, 0, 0]),
                                        JointState(0.2, -0.4, 1.0))])


def test_playback_examples():
    traj = _two_sample()
    assert playback_iter(traj, 1.0, 0.0) is traj.samples[0]
    assert playback_iter(traj, 1.0, 2.0) is traj.samples[1]
    mid = playback_iter(traj, 1.0, 1.0)
    assert mid.pose.angle_deg == pytest.approx(45.0, abs=1e-9)
    np.testing.assert_allclose(mid.pose.translation, [5, 0, 0], atol=1e-12)
    np.testing.assert_allclose(mid.joints.as_array(), [0.1, -0.2, 0.5], atol=1e-12)
    assert playback_iter(traj, 2.0, 0.5).t == pytest.approx(1.0)
    assert playback_iter(traj, 1.0, 99.0) is traj.samples[1]


def test_playback_exact_interior_timestamp():
    samples = [TrajectorySample(float(i), RigidTransform.from_axis_angle([1, 0, 0], 10.0 * i), J0) for i in range(5)]
    traj = Trajectory(samples)
    assert playback_iter(traj, 1.0, 3.0) is samples[3]


def test_playback_errors():
    traj = _two_sample()
    for speed, clock in ((0.0, 0.0), (-1.0, 0.0), (1.0, -0.1)):
        with pytest.raises(ValidationError):
            playback_iter(traj, speed, clock)
    with pytest.raises(ValidationError):
        playback_iter(Trajectory(), 1.0, 0.0)


def test_playback_monotone_and_stream_duration():
    rng = np.random.default_rng(4)
    ts = np.cumsum(rng.uniform(0.01, 0.3, 60))
    traj = Trajectory([TrajectorySample(float(t), random_transform(rng), J0) for t in ts])
    for speed in (0.5, 1.0, 3.0):
        clocks = np.sort(rng.uniform(0, traj.duration, 200))
        times = [playback_iter(traj, speed, c).t for c in clocks]
        assert all(b >= a for a, b in zip(times, times[1:]))
        stream = list(playback_stream(traj, speed, 30.0))
        assert stream[-1][0] == pytest.approx(traj.duration / speed)
        assert stream[-1][1] is traj.samples[-1]


def test_slerp_midpoint_random():
    rng = np.random.default_rng(5)
    for _ in range(50):
        a, b = random_transform(rng), random_transform(rng)
        traj = Trajectory([TrajectorySample(0.0, a, J0), TrajectorySample(1.0, b, J0)])
        mid = playback_iter(traj, 1.0, 0.5).pose
        half = angular_distance(a.rotation, b.rotation) / 2
        assert angular_distance(a.rotation, mid.rotation) == pytest.approx(half, abs=1e-9)
        assert angular_distance(mid.rotation, b.rotation) == pytest.approx(half, abs=1e-9)


# trajectory file --------------------------------------------------------------

def _random_trajectory(rng, n=50, with_session=True):
    samples = [TrajectorySample(0.1 * i + rng.uniform(0, 0.05), random_transform(rng, 100.0),
                                JointState(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0, 1)),
                                "PSM1" if i % 3 else "PSM2") for i in range(n)]
    session = None
    if with_session:
        session = SessionState({"left": random_transform(rng), "right": random_transform(rng)},
                               {"left": random_transform(rng), "right": random_transform(rng)},
                               random_transform(rng, 500.0), {"PSM1": random_transform(rng)}, 0.0)
    return Trajectory(samples, session, {"source": "unit test", "seed": "3"})


def test_trajectory_byte_identical_round_trip(tmp_path):
    rng = np.random.default_rng(6)
    for with_session in (True, False):
        traj = _random_trajectory(rng, with_session=with_session)
        path = tmp_path / "t.traj"
        write_trajectory(path, traj)
        first = path.read_bytes()
        back = read_trajectory(path)
        write_trajectory(path, back)
        assert path.read_bytes() == first
        for a, b in zip(traj.samples, back.samples):
            assert a.t == b.t and a.instrument_id == b.instrument_id
            np.testing.assert_array_equal(a.pose.as_array(), b.pose.as_array())
            np.testing.assert_array_equal(a.joints.as_array(), b.joints.as_array())
        assert back.metadata == traj.metadata
        if with_session:
            np.testing.assert_array_equal(back.session.initial_ecm.as_array(), traj.session.initial_ecm.as_array())


def test_empty_trajectory_is_not_written(tmp_path):
    with pytest.raises(ValidationError):
        write_trajectory(tmp_path / "x", Trajectory())


GOOD = format_trajectory(Trajectory([TrajectorySample(0.0, I, J0), TrajectorySample(1.0, I, J0)],
                                    trivial_state(), {}))


@pytest.mark.parametrize("text", [
    "",
    GOOD.replace("arplayback-trajectory 1", "arplayback-trajectory 9"),
    GOOD.replace("# arplayback-trajectory 1\n", ""),
    GOOD.replace("\n1.0 1.0 0.0", "\n0.0 1.0 0.0"),
    GOOD.replace("\n1.0 1.0 0.0", "\n1.0 2.0 0.0"),
    GOOD.replace(" PSM1\n", "\n", 1),
    GOOD.replace("\n1.0 1.0 0.0", "\n1.0 1.0 zero"),
    GOOD.replace("# columns", "# colums"),
    GOOD.replace("# columns t", "# columns time"),
    GOOD + "2 1 0 0 0 0 0 0 0 0 -1 PSM1\n",
    "\n".join(line for line in GOOD.splitlines() if not line.startswith("# initial_ecm")) + "\n",
    "\n".join(line for line in GOOD.splitlines() if not line.startswith("# registration left")) + "\n",
    "\n".join(line for line in GOOD.splitlines() if line.startswith("#")) + "\n",
])
def test_malformed_trajectory(text):
    assert text != GOOD
    with pytest.raises(FormatError):
        parse_trajectory(text)


def test_readings_and_timed_poses_round_trip():
    rng = np.random.default_rng(8)
    readings = [Reading(float(i), random_transform(rng), random_transform(rng), J0, "PSM1") for i in range(5)]
    back = parse_readings(format_readings(readings))
    assert format_readings(back) == format_readings(readings)
    times, poses = [0.0, 0.5, 1.0], [random_transform(rng) for _ in range(3)]
    t2, p2 = parse_timed_poses(format_timed_poses(times, poses))
    assert t2 == times and format_timed_poses(t2, p2) == format_timed_poses(times, poses)
    assert_pose_close(pose_at(times, poses, -1.0), poses[0], 0.0, 0.0)
    assert_pose_close(pose_at(times, poses, 0.5), poses[1], 1e-12, 1e-9)
    assert_pose_close(pose_at(times, poses, 7.0), poses[-1], 0.0, 0.0)


@pytest.mark.parametrize("text", ["", "0 1 0 0 0 0 0\n", "0 1 0 0 0 0 0 0\n0 1 0 0 0 0 0 0\n",
                                  "0 2 0 0 0 0 0 0\n"])
def test_malformed_timed_poses(text):
    with pytest.raises(FormatError):
        parse_timed_poses(text)


@pytest.mark.parametrize("text", ["", "0 " + "1 0 0 0 0 0 0 " * 2 + "0 0 0\n",
                                  "0 " + "1 0 0 0 0 0 0 " * 2 + "0 0 -1 PSM1\n"])
def test_malformed_readings(text):
    with pytest.raises(FormatError):
        parse_readings(text)


def test_record_runs_500_samples_quickly(world):
    state = true_state(world)
    sess = world.sessions["a"]
    times = np.linspace(world.t0, world.t_end, 500)
    readings = [Reading(float(t), sess.ecm_pose(t), reported_psm_pose(world, t, NoiseSpec()),
                        world.tool_state(t).joints) for t in times]
    start = time.perf_counter()
    traj = record(state, readings, {"k": "v"})
    assert time.perf_counter() - start < 1.0
    assert len(traj) == 500 and traj.duration == pytest.approx(times[-1] - times[0])
    assert math.isclose(traj.samples[0].t, times[0])
