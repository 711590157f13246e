import math
from dataclasses import replace

import numpy as np
import pytest

from arplayback.camera import project_points
from arplayback.errors import FormatError, ValidationError
from arplayback.geometry import RigidTransform, angular_distance, compose, random_transform
from arplayback.pipeline import SessionState, record_sample
from arplayback.simulator import (INSTRUMENT_ID, NoiseSpec, PoseErrorReport, ScenarioSpec,
                                  evaluate_registration_relative, format_report, make_world, observe_fiducials,
                                  read_scenario, reported_psm_pose, run_monte_carlo, run_scenario,
                                  scenario_from_dict, stage_rng)
from helpers import assert_pose_close

ZERO = NoiseSpec()


@pytest.fixture(scope="module")
def world():
    return make_world(3, duration=20.0)


def _exact(world, camera="left"):
    view = world.initial_view("a", camera)
    return {label: project_points(world.cameras[camera], view.apply(world.fmap[label])) for label in world.fmap.labels()}


# observations -----------------------------------------------------------------

def test_noiseless_corners_are_exact(world):
    exact = _exact(world)
    batch = observe_fiducials(world, "left", 0, ZERO)
    assert len(batch.detections) == len(exact)
    for label, px in batch.detections:
        np.testing.assert_array_equal(px, exact[label])


def test_occluded_marker_is_absent(world):
    noise = NoiseSpec(occlusion=((2, 0, 4), (5, 3, -1)))
    labels = lambda i: {lab for lab, _ in observe_fiducials(world, "left", i, noise).detections}  # noqa: E731
    assert 2 not in labels(0) and 5 in labels(0)
    assert 2 not in labels(4) and 5 not in labels(4)
    assert 2 in labels(5) and 5 not in labels(500)


def test_pixel_noise_std(world):
    exact = _exact(world)
    noise = NoiseSpec(pixel_sigma=0.5)
    rng = np.random.default_rng(0)
    res = []
    while len(res) < 2 * 10_000:
        for label, px in observe_fiducials(world, "left", 0, noise, rng).detections:
            res.extend((px - exact[label]).ravel())
    std = float(np.std(res))
    assert abs(std - 0.5) <= 0.05, std


def test_outliers_are_injected(world):
    exact = _exact(world)
    noise = NoiseSpec(outlier_rate=0.3, outlier_px=40.0)
    rng = np.random.default_rng(1)
    moved = total = 0
    for _ in range(200):
        for label, px in observe_fiducials(world, "left", 0, noise, rng).detections:
            d = np.linalg.norm(px - exact[label], axis=1)
            moved += int(np.sum(d > 0))
            total += len(d)
    assert abs(moved / total - 0.3) < 0.03


def test_noise_spec_validation():
    for bad in (dict(pixel_sigma=-1), dict(outlier_rate=1.5), dict(psm_rot_deg=float("nan")),
                dict(occlusion=((1, 5, 2),)), dict(occlusion=((1, 2),))):
        with pytest.raises(ValidationError):
            NoiseSpec(**bad)


# reported PSM pose ----------------------------------------------------------

def test_reported_pose_without_noise_or_correction(world):
    w = replace(world, corrections={INSTRUMENT_ID: RigidTransform()})
    st = w.sessions["a"]
    for t in (w.t0, 3.3, w.t_end):
        ecm = st.ecm_pose(t)
        want = compose(compose(ecm.inverse(), st.base_T_scene), w.tool_state(t).pose)
        assert_pose_close(reported_psm_pose(w, t, ZERO), want, 1e-9, 1e-9)
    with pytest.raises(ValidationError):
        reported_psm_pose(w, w.t_end + 100.0, ZERO)


def test_known_correction_is_recovered(world):
    t_cor = RigidTransform.from_translation([2.0, 0.0, 0.0])
    w = replace(world, corrections={INSTRUMENT_ID: t_cor})
    sess = w.sessions["a"]
    state = SessionState({"left": w.initial_view("a")}, {"left": w.handeye["left"]}, sess.ecm_poses[0],
                         {INSTRUMENT_ID: t_cor}, sess.ecm_times[0])
    for t in np.linspace(w.t0, w.t_end, 21):
        smp = record_sample(state, sess.ecm_pose(t), reported_psm_pose(w, t, ZERO), w.tool_state(t).joints, t)
        assert_pose_close(smp.pose, w.tool_state(t).pose, 1e-9, 1e-9)
    # without the correction the recording is off by 2 mm at the initial ECM pose
    plain = replace(state, corrections={})
    smp = record_sample(plain, sess.ecm_poses[0], reported_psm_pose(w, w.t0, ZERO), w.tool_state(w.t0).joints, w.t0)
    assert np.linalg.norm(smp.pose.translation - w.tool_state(w.t0).pose.translation) == pytest.approx(2.0)


def test_rotation_noise_distribution(world):
    # 1 deg is the RMS angle, so the per-axis rotation vector std is 1/sqrt(3) deg and
    # the angle follows a scaled chi(3) law with mean sqrt(8 / (3 pi)) deg
    noise = NoiseSpec(psm_rot_deg=1.0)
    rng = np.random.default_rng(2)
    t = 4.0
    clean = reported_psm_pose(world, t, ZERO)
    angles = np.array([angular_distance(clean.rotation, reported_psm_pose(world, t, noise, rng).rotation)
                       for _ in range(1000)])
    expected_mean = math.sqrt(8.0 / (3.0 * math.pi))
    assert abs(angles.mean() - expected_mean) <= 0.15 * expected_mean
    assert math.sqrt(np.mean(angles ** 2)) == pytest.approx(1.0, rel=0.1)


# error reports ----------------------------------------------------------------

def test_pose_error_report_examples():
    rng = np.random.default_rng(3)
    poses = [random_transform(rng) for _ in range(5)]
    rep = PoseErrorReport.compare(poses, poses)
    assert all(abs(v) < 1e-12 for _, v in rep.summary("p"))
    rep = PoseErrorReport.compare([RigidTransform.from_translation([3, 4, 0])], [RigidTransform()])
    assert rep.l2[0] == 5.0
    np.testing.assert_array_equal(rep.abs_xyz[0], [3, 4, 0])
    with pytest.raises(ValidationError):
        PoseErrorReport.compare([], [])
    with pytest.raises(ValidationError):
        PoseErrorReport.compare(poses, poses[:2])


def test_pose_error_report_matches_streaming_statistics():
    rng = np.random.default_rng(4)
    est = [random_transform(rng, 10.0) for _ in range(500)]
    truth = [random_transform(rng, 10.0) for _ in range(500)]
    rep = PoseErrorReport.compare(est, truth)
    summary = dict(rep.summary("p"))
    # Welford, one pass, population variance
    n, mean, m2 = 0, 0.0, 0.0
    for e, g in zip(est, truth):
        x = float(np.linalg.norm(e.translation - g.translation))
        n += 1
        delta = x - mean
        mean += delta / n
        m2 += delta * (x - mean)
    assert summary["p.l2_mm.mean"] == pytest.approx(mean, abs=1e-12)
    assert summary["p.l2_mm.std"] == pytest.approx(math.sqrt(m2 / n), abs=1e-12)
    assert np.all(rep.l2 ** 2 <= np.sum(rep.abs_xyz ** 2, axis=1) + 1e-9)


def test_relative_registration_examples():
    rng = np.random.default_rng(5)
    v = random_transform(rng)
    rep = evaluate_registration_relative([v] * 4, [v] * 4)
    assert np.all(rep.l2 == 0) and np.all(rep.angle_deg == 0)
    truth = [random_transform(rng) for _ in range(6)]
    est = [compose(t, RigidTransform.from_rotvec(rng.normal(0, 0.01, 3), rng.normal(0, 1, 3))) for t in truth]
    full = evaluate_registration_relative(truth, est)
    for i in range(2, 6):
        prefix = evaluate_registration_relative(truth[:i], est[:i])
        np.testing.assert_array_equal(prefix.l2, full.l2[:i - 1])
    with pytest.raises(ValidationError):
        evaluate_registration_relative(truth[:1], est[:1])


# scenarios ------------------------------------------------------------------

@pytest.fixture(scope="module")
def zero_result():
    return run_scenario(ScenarioSpec.from_preset("zero", samples=100), 11)


def test_zero_noise_every_stage_exact(zero_result):
    m = zero_result.as_dict()
    errors = {k: v for k, v in m.items()
              if any(s in k for s in ("trans_mm", "rot_deg", "l2_mm", "angle_deg", "abs_", "px_mean", "ndc_max"))}
    assert len(errors) > 30
    assert max(errors.values()) < 1e-6, max(errors.items(), key=lambda kv: kv[1])


def test_determinism_and_stream_independence():
    spec = ScenarioSpec.from_preset("paper-comparable", samples=40, relative_poses=4, handeye_train=8,
                                    handeye_test=4)
    a, b = run_scenario(spec, 5), run_scenario(spec, 5)
    assert format_report(spec, [a]) == format_report(spec, [b])
    assert a.metrics != run_scenario(spec, 6).metrics
    # turning a stage off must not shift the draws of the stages before it
    off = run_scenario(replace(spec, stages={"handeye": False}), 5).as_dict()
    on = a.as_dict()
    for key in ("registration.left.trans_mm", "registration.b.right.rot_deg", "registration.relative.l2_mm.mean"):
        assert on[key] == off[key]


def test_stage_rng_streams_differ():
    draws = {s: stage_rng(1, s).random() for s in ("world", "registration", "record")}
    assert len(set(draws.values())) == 3
    assert stage_rng(1, "record").random() == draws["record"]


def _single_source(**noise):
    return ScenarioSpec(noise=NoiseSpec(**noise), samples=60, relative_poses=5, handeye_trans_mm=25.0,
                        handeye_angle_deg=6.0)


def test_error_composition_ecm_only():
    m = run_scenario(_single_source(ecm_rot_deg=1.0, ecm_trans_mm=3.0), 2).as_dict()
    assert m["handeye.left.test.l2_mm.mean"] > 0.1
    assert m["overlay.same.px_mean"] > 0.1
    for key in ("registration.left.trans_mm", "registration.right.rot_deg", "registration.relative.l2_mm.mean",
                "correction.test.l2_mm.mean", "pose.l2_mm.mean", "pose.angle_deg.mean"):
        assert m[key] < 1e-6, key


def test_error_composition_psm_only():
    m = run_scenario(_single_source(psm_rot_deg=2.0, psm_trans_mm=0.5), 2).as_dict()
    assert m["pose.l2_mm.mean"] > 0.1 and m["correction.test.l2_mm.mean"] > 0.1
    for key in ("registration.left.trans_mm", "registration.b.left.trans_mm", "registration.relative.l2_mm.mean",
                "handeye.left.test.l2_mm.mean", "handeye.right.truth.rot_deg"):
        assert m[key] < 1e-6, key


def test_error_composition_pixel_only():
    m = run_scenario(_single_source(pixel_sigma=0.5), 2).as_dict()
    assert m["registration.left.trans_mm"] > 1e-3 and m["registration.relative.l2_mm.mean"] > 1e-3
    assert m["pose.l2_mm.mean"] > 1e-3
    # registration error is rigid, so the correction still maps the touched points exactly
    assert m["correction.test.l2_mm.mean"] < 1e-6


def test_noise_monotonicity():
    sigmas = (0.0, 0.25, 0.5, 1.0)
    medians = []
    for s in sigmas:
        spec = ScenarioSpec(noise=NoiseSpec(pixel_sigma=s), samples=50,
                            stages={"handeye": False, "playback": False, "relative": False})
        results = run_monte_carlo(spec, range(100))
        medians.append(float(np.median([r.as_dict()["pose.l2_mm.mean"] for r in results])))
    assert medians[0] < 1e-9
    assert all(b >= a for a, b in zip(medians, medians[1:])), medians


def test_monte_carlo_order_and_aggregates():
    spec = ScenarioSpec.from_preset("zero", samples=20, relative_poses=3, handeye_train=4, handeye_test=2,
                                    n_seeds=3, seed=10)
    results = run_monte_carlo(spec)
    assert [r.seed for r in results] == [10, 11, 12]
    text = format_report(spec, results)
    assert "seeds = 10 11 12" in text and "all.pose.l2_mm.mean.median = " in text


# scenario files ---------------------------------------------------------------

def test_scenario_file(tmp_path):
    path = tmp_path / "s.toml"
    path.write_text("""
[scenario]
name = "unit"
preset = "paper-comparable"
samples = 30
seed = 4

[noise]
pixel_sigma = 0.3
occlusion = [[1, 0, -1]]

[stages]
relative = false

[world]
base_a = [1, 0, 0, 0, 10, 0, 0]
views_b = [{view = [1, 0, 0, 0, 0, 0, 150]}, {view = [1, 0, 0, 0, 5, 0, 150]}]
""")
    spec = read_scenario(path)
    assert spec.name == "unit" and spec.samples == 30 and spec.seed == 4
    assert spec.noise.pixel_sigma == 0.3 and spec.noise.psm_rot_deg == 4.0
    assert spec.noise.occlusion == ((1, 0, -1),)
    assert spec.handeye_trans_mm == 25.0
    assert spec.stages["relative"] is False and spec.stages["handeye"] is True
    w = make_world(0, spec.duration, spec)
    np.testing.assert_allclose(w.sessions["a"].base_T_scene.translation, [10, 0, 0])
    assert len(w.sessions["b"].ecm_poses) == 2


@pytest.mark.parametrize("cfg", [
    {"bogus": {}},
    {"scenario": {"sample": 3}},
    {"scenario": {"samples": 1}},
    {"noise": {"pixel_sigma": -1.0}},
    {"noise": {"preset": "loud"}},
    {"noise": {"jitter": 1.0}},
    {"stages": {"teleport": True}},
    {"world": {"views_a": [{"view": [1, 0, 0]}]}},
    {"world": {"cameras": {"left": {"fx": 1000, "fy": 1000, "cx": 1, "cy": 1, "width": 10, "height": 10}}}},
    {"world": {"planet": 3}},
])
def test_malformed_scenario(cfg):
    with pytest.raises((FormatError, ValidationError)):
        scenario_from_dict(cfg)
