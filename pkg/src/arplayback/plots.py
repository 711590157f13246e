"""Figures for evaluation reports, rendered off-screen to image files."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .simulator import ScenarioResult  # noqa: E402

# fixed metadata keeps repeated renders byte-stable
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def pose_error_figure(results: Sequence[ScenarioResult], path) -> Path:
    """Box plots of per-axis, L2 and angular pose-estimation errors over all seeds."""
    reports = [r.pose_report for r in results if r.pose_report is not None]
    abs_xyz = np.vstack([rep.abs_xyz for rep in reports])
    l2 = np.concatenate([rep.l2 for rep in reports])
    ang = np.concatenate([rep.angle_deg for rep in reports])
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.6), gridspec_kw={"width_ratios": [4, 1]})
    ax1.boxplot([abs_xyz[:, 0], abs_xyz[:, 1], abs_xyz[:, 2], l2], showfliers=False)
    ax1.set_xticks([1, 2, 3, 4], ["|x|", "|y|", "|z|", "L2"])
    ax1.set_ylabel("translation error (mm)")
    ax2.boxplot([ang], showfliers=False)
    ax2.set_xticks([1], ["angle"])
    ax2.set_ylabel("rotation error (deg)")
    fig.suptitle(f"Pose estimation error ({len(reports)} seeds, {len(l2)} samples)")
    return _save(fig, Path(path))


def overlay_figure(results: Sequence[ScenarioResult], path) -> Path:
    """Overlay error over time for the first seed and per-seed means, same vs cross session."""
    with_overlay = [r for r in results if r.overlay_px]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    if with_overlay:
        first = with_overlay[0]
        times = np.array(first.trajectory.times) - first.trajectory.times[0]
        for label, style in (("same", "-"), ("cross", "--")):
            ax1.plot(times, first.overlay_px[(label, "left")], style, lw=1, label=f"{label} session")
        ax1.set_xlabel("time (s)")
        ax1.set_ylabel("mean vertex error (px)")
        ax1.set_title(f"seed {first.seed}, left camera")
        ax1.legend()
        same = [r.as_dict()["overlay.same.px_mean"] for r in with_overlay]
        cross = [r.as_dict()["overlay.cross.px_mean"] for r in with_overlay]
        ax2.boxplot([same, cross], showfliers=True)
        ax2.set_xticks([1, 2], ["same session", "cross session"])
        ax2.set_ylabel("per-seed mean error (px)")
        ax2.set_title(f"{len(with_overlay)} seeds")
    fig.suptitle("Playback overlay reprojection error")
    return _save(fig, Path(path))


def stage_figure(results: Sequence[ScenarioResult], path) -> Path:
    """Distribution over seeds of the main stage errors."""
    keys = [("handeye.left.test.l2_mm.mean", "hand-eye L\n(mm)"),
            ("handeye.right.test.l2_mm.mean", "hand-eye R\n(mm)"),
            ("correction.test.l2_mm.mean", "correction\n(mm)"),
            ("registration.relative.l2_mm.mean", "registration\nrelative (mm)"),
            ("pose.l2_mm.mean", "pose L2\n(mm)")]
    data, labels = [], []
    for key, label in keys:
        vals = [r.as_dict()[key] for r in results if key in r.as_dict()]
        if vals:
            data.append(vals)
            labels.append(label)
    fig, ax = plt.subplots(figsize=(8, 3.6))
    if data:
        ax.boxplot(data, showfliers=True)
        ax.set_xticks(range(1, len(labels) + 1), labels)
    ax.set_ylabel("error (mm)")
    ax.set_title(f"Stage errors across {len(results)} seeds")
    return _save(fig, Path(path))


def render_report_figures(results: Sequence[ScenarioResult], directory, stem: str = "report") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    out = [stage_figure(results, directory / f"{stem}_stages.png")]
    if any(r.pose_report is not None for r in results):
        out.append(pose_error_figure(results, directory / f"{stem}_pose.png"))
    if any(r.overlay_px for r in results):
        out.append(overlay_figure(results, directory / f"{stem}_overlay.png"))
    return out
