"""Command-line front end.

Every subcommand reads plain-text inputs, writes its product plus a
``key = value`` report, and exits with a code that identifies the failure
class (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibration import (build_motion_pairs, fit_correction, motion_prediction_errors, point_residuals,
                          read_point_pairs, read_pose, read_pose_sequence, solve_handeye, write_pose_sequence)
from .camera import BehindCameraError, read_intrinsics
from .errors import (ArPlaybackError, DegenerateConfigurationError, FormatError, InsufficientDataError,
                     InsufficientDetectionsError, NoConsensusError, UnobservableTranslationError,
                     ValidationError)
from .geometry import GeometryError, invert
from .instrument import COMPONENTS, default_instrument, place_components, read_instrument
from .pipeline import (CAMERAS, SessionState, format_overlay_stream, format_trajectory, playback_iter,
                       pose_at, project_components, component_camera_points, read_readings,
                       read_timed_poses, read_trajectory, record, view_to_scene, write_trajectory)
from .registration import N_DETECT_THRES, N_FRAME_THRES, accumulate, read_detections, read_fiducial_map, register_scene
from .robust import RobustConfig
from .textio import fmt

EXIT_OK = 0
EXIT_CODES = {
    FormatError: 2,
    InsufficientDetectionsError: 3,
    DegenerateConfigurationError: 4,
    UnobservableTranslationError: 5,
    InsufficientDataError: 6,
    NoConsensusError: 7,
    ValidationError: 8,
    GeometryError: 8,
    BehindCameraError: 8,
}
EXIT_IO = 9
EXIT_INTERNAL = 1


def _report_text(command: str, args: argparse.Namespace, items) -> str:
    """Reproducibility header (the exact options used) followed by the metrics."""
    lines = [f"# arplayback {__version__} {command}"]
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        lines.append(f"option.{key} = {getattr(args, key)}")
    for key, value in items:
        lines.append(f"{key} = {fmt(value) if isinstance(value, (float, np.floating)) else value}")
    return "\n".join(lines) + "\n"


def _emit_report(command: str, args, items) -> None:
    text = _report_text(command, args, items)
    if getattr(args, "report", None):
        Path(args.report).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _pnp_config(args) -> RobustConfig:
    return RobustConfig(inlier_threshold=args.inlier_px, max_iterations=args.ransac_iters, seed=args.seed)


def _stats(prefix: str, values) -> list:
    values = np.asarray(values, dtype=float)
    return [(f"{prefix}.mean", float(np.mean(values))), (f"{prefix}.std", float(np.std(values)))]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_register(args) -> int:
    fmap = read_fiducial_map(args.map)
    k = read_intrinsics(args.intrinsics)
    frames = read_detections(args.detections)
    pose, rep = register_scene(frames, fmap, k, _pnp_config(args), n_frame_thres=args.frames,
                               n_detect_thres=args.detect_thres, return_report=True)
    write_pose_sequence(args.out, [pose])
    corr = accumulate(frames, fmap, args.frames)
    _emit_report("register", args, [
        ("detections", corr.n_detect), ("correspondences", len(corr)), ("inliers", rep.n_inliers),
        ("iterations", rep.iterations), ("rms_residual_px", rep.rms_residual_px)])
    return EXIT_OK


def cmd_calibrate_handeye(args) -> int:
    cams = read_pose_sequence(args.camera_poses)
    robots = read_pose_sequence(args.robot_poses)
    pairs = build_motion_pairs(cams, robots)
    cfg = RobustConfig(inlier_threshold=args.inlier_mm, angle_threshold_deg=args.inlier_deg,
                       max_iterations=args.ransac_iters, seed=args.seed)
    x, rep = solve_handeye(pairs, cfg, return_report=True)
    handeye = invert(x)
    write_pose_sequence(args.out, [handeye])
    trans, rot = motion_prediction_errors(x, pairs)
    items = [("train.motions", len(pairs)), ("train.inliers", int(rep.inliers.sum()))]
    items += _stats("train.l2_mm", trans[rep.inliers]) + _stats("train.angle_deg", rot[rep.inliers])
    if args.test_camera_poses or args.test_robot_poses:
        if not (args.test_camera_poses and args.test_robot_poses):
            raise ValidationError("test evaluation needs both --test-camera-poses and --test-robot-poses")
        test = build_motion_pairs(read_pose_sequence(args.test_camera_poses),
                                  read_pose_sequence(args.test_robot_poses))
        trans, rot = motion_prediction_errors(x, test)
        items += [("test.motions", len(test))] + _stats("test.l2_mm", trans) + _stats("test.angle_deg", rot)
    _emit_report("calibrate-handeye", args, items)
    return EXIT_OK


def cmd_fit_correction(args) -> int:
    train = read_point_pairs(args.pairs)
    cfg = RobustConfig(inlier_threshold=args.inlier_mm, max_iterations=args.ransac_iters, seed=args.seed)
    t_cor, rep = fit_correction(train, cfg, return_report=True)
    write_pose_sequence(args.out, [t_cor])
    items = [("train.points", len(train)), ("train.inliers", int(rep.inliers.sum()))]
    items += _stats("train.l2_mm", rep.residual_mm[rep.inliers])
    if args.test_pairs:
        test = read_point_pairs(args.test_pairs)
        items += [("test.points", len(test))] + _stats("test.l2_mm", point_residuals(t_cor, test))
    _emit_report("fit-correction", args, items)
    return EXIT_OK


def _session(args) -> tuple[dict, dict]:
    regs = {"left": read_pose(args.registration_left)}
    hes = {"left": read_pose(args.handeye_left)}
    if args.registration_right or args.handeye_right:
        if not (args.registration_right and args.handeye_right):
            raise ValidationError("the right camera needs both a registration and a hand-eye file")
        regs["right"] = read_pose(args.registration_right)
        hes["right"] = read_pose(args.handeye_right)
    return regs, hes


def cmd_record(args) -> int:
    readings = read_readings(args.readings)
    regs, hes = _session(args)
    initial = read_pose(args.initial_ecm) if args.initial_ecm else readings[0].ecm
    corrections = {}
    if args.correction:
        corrections = {iid: read_pose(args.correction) for iid in sorted({r.instrument_id for r in readings})}
    start = args.registered_at if args.registered_at is not None else readings[0].t
    state = SessionState(regs, hes, initial, corrections, start)
    traj = record(state, readings, {"source": Path(args.readings).name})
    write_trajectory(args.out, traj)
    _emit_report("record", args, [("samples", len(traj)), ("duration_s", float(traj.duration))])
    return EXIT_OK


def cmd_playback(args) -> int:
    traj = read_trajectory(args.trajectory)
    if args.rewrite:
        with open(args.rewrite, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(format_trajectory(traj))
    regs, hes = _session(args)
    initial = read_pose(args.initial_ecm)
    state = SessionState(regs, hes, initial)
    cams = {"left": read_intrinsics(args.intrinsics_left)}
    if args.intrinsics_right:
        if "right" not in regs:
            raise ValidationError("--intrinsics-right needs a right-camera registration and hand-eye")
        cams["right"] = read_intrinsics(args.intrinsics_right)
    m = read_instrument(args.instrument) if args.instrument else default_instrument()
    if args.ecm_poses:
        ecm_times, ecm_poses = read_timed_poses(args.ecm_poses)
    else:
        ecm_times, ecm_poses = [0.0], [initial]

    wall = traj.duration / args.speed
    n = int(np.floor(wall * args.rate + 1e-9))
    clocks = [i / args.rate for i in range(n + 1)]
    if clocks[-1] < wall:
        clocks.append(wall)
    frames, visible = [], 0
    for clock in clocks:
        smp = playback_iter(traj, args.speed, clock)
        ecm = pose_at(ecm_times, ecm_poses, clock)
        comps = place_components(smp.pose, smp.joints, m)
        for camera in [c for c in CAMERAS if c in cams]:
            pts = component_camera_points(comps, view_to_scene(state, ecm, camera), m)
            projected = project_components(pts, cams[camera])
            for name in COMPONENTS:
                ndc, mask = projected[name]
                visible += int(mask.sum())
                frames.append((clock, smp.t, camera, name, ndc[mask]))
    Path(args.out).write_text(format_overlay_stream(frames, args.speed, args.rate, wall), encoding="utf-8")
    _emit_report("playback", args, [("frames", len(clocks)), ("trajectory_duration_s", float(traj.duration)),
                                    ("wall_clock_duration_s", float(wall)), ("visible_vertices", visible)])
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .simulator import ScenarioSpec, format_report, read_scenario, run_monte_carlo

    if args.scenario:
        spec = read_scenario(args.scenario)
        if args.preset:
            raise ValidationError("use either --scenario or --preset, not both")
    else:
        spec = ScenarioSpec.from_preset(args.preset or "zero")
    overrides = {}
    for name in ("seed", "frames", "detect_thres", "ransac_iters", "inlier_px", "samples"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.seeds is not None:
        overrides["n_seeds"] = args.seeds
    if overrides:
        from dataclasses import replace
        spec = replace(spec, **overrides)
    results = run_monte_carlo(spec, workers=args.workers)
    text = format_report(spec, results)
    if args.out:
        out = Path(args.out)
        out.write_text(text, encoding="utf-8")
        if not args.no_figures:
            from .plots import render_report_figures
            render_report_figures(results, args.figures or out.parent, out.stem)
    sys.stdout.write(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def _positive_float(text: str) -> float:
    value = float(text)
    if not value > 0 or not np.isfinite(value):
        raise argparse.ArgumentTypeError("must be a positive number")
    return value


def _add_ransac(p) -> None:
    p.add_argument("--seed", type=int, default=0, help="RANSAC sampling seed")
    p.add_argument("--ransac-iters", type=_positive_int, default=1000, help="RANSAC iteration cap")


def _add_session(p) -> None:
    p.add_argument("--registration-left", required=True, help="left camera-from-scene pose file")
    p.add_argument("--handeye-left", required=True, help="ECM-from-left-camera pose file")
    p.add_argument("--registration-right", help="right camera-from-scene pose file")
    p.add_argument("--handeye-right", help="ECM-from-right-camera pose file")
    p.add_argument("--initial-ecm", help="base-from-ECM pose at registration")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arplayback", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("register", help="camera-from-scene pose from fiducial detections")
    p.add_argument("--detections", required=True)
    p.add_argument("--map", required=True, help="fiducial map file")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="output pose file")
    p.add_argument("--report")
    p.add_argument("--frames", type=_positive_int, default=N_FRAME_THRES, help="frames to pool")
    p.add_argument("--detect-thres", type=_positive_int, default=N_DETECT_THRES,
                   help="marker detections required")
    p.add_argument("--inlier-px", type=_positive_float, default=2.0)
    _add_ransac(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("calibrate-handeye", help="ECM-from-camera transform from paired pose sequences")
    p.add_argument("--camera-poses", required=True, help="camera-from-scene registrations")
    p.add_argument("--robot-poses", required=True, help="base-from-ECM poses, index aligned")
    p.add_argument("--test-camera-poses")
    p.add_argument("--test-robot-poses")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--inlier-mm", type=_positive_float, default=2.0)
    p.add_argument("--inlier-deg", type=_positive_float, default=1.0)
    _add_ransac(p)
    p.set_defaults(func=cmd_calibrate_handeye)

    p = sub.add_parser("fit-correction", help="kinematic correction from actual/reported point pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--test-pairs")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--inlier-mm", type=_positive_float, default=2.0)
    _add_ransac(p)
    p.set_defaults(func=cmd_fit_correction)

    p = sub.add_parser("record", help="scene-frame trajectory from API readings")
    p.add_argument("--readings", required=True)
    _add_session(p)
    p.add_argument("--correction", help="correction pose file (applied to every instrument)")
    p.add_argument("--registered-at", type=float, help="registration time (default: first reading)")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_record)

    p = sub.add_parser("playback", help="overlay stream for a trajectory in a new session")
    p.add_argument("--trajectory", required=True)
    _add_session(p)
    p.add_argument("--intrinsics-left", required=True)
    p.add_argument("--intrinsics-right")
    p.add_argument("--instrument", help="instrument config (default: built-in needle driver)")
    p.add_argument("--ecm-poses", help="timed base-from-ECM poses, keyed by playback clock")
    p.add_argument("--speed", type=_positive_float, default=1.0)
    p.add_argument("--rate", type=_positive_float, default=30.0, help="output frames per second")
    p.add_argument("--rewrite", help="also re-serialize the parsed trajectory here")
    p.add_argument("--out", required=True, help="overlay stream file")
    p.add_argument("--report")
    p.set_defaults(func=cmd_playback)

    p = sub.add_parser("evaluate", help="simulated end-to-end evaluation")
    p.add_argument("--scenario", help="scenario file")
    p.add_argument("--preset", help="noise preset when no scenario file is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=_positive_int, help="number of Monte-Carlo seeds")
    p.add_argument("--samples", type=_positive_int)
    p.add_argument("--frames", type=_positive_int)
    p.add_argument("--detect-thres", type=_positive_int)
    p.add_argument("--ransac-iters", type=_positive_int)
    p.add_argument("--inlier-px", type=_positive_float)
    p.add_argument("--workers", type=_positive_int, default=1)
    p.add_argument("--out", help="report file; figures are written next to it")
    p.add_argument("--figures", help="figure directory (default: the report's directory)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # usage errors exit with code 2
    try:
        return args.func(args)
    except tuple(EXIT_CODES) as exc:
        code = next(c for cls, c in EXIT_CODES.items() if isinstance(exc, cls))
        print(f"error: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ArPlaybackError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
