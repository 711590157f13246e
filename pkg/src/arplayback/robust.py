"""Shared RANSAC configuration and iteration bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RobustConfig:
    """RANSAC knobs.

    ``inlier_threshold`` is in the residual unit of the solver using it
    (pixels for PnP, millimetres for point-set and hand-eye fits).
    ``angle_threshold_deg`` is only read by the hand-eye solver.
    """

    inlier_threshold: float = 2.0
    angle_threshold_deg: float = 1.0
    confidence: float = 0.999
    max_iterations: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.inlier_threshold <= 0 or self.angle_threshold_deg <= 0:
            raise ValueError("thresholds must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must be in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def required_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    """Iterations needed to draw one all-inlier sample with ``confidence``."""
    if inlier_ratio <= 0.0:
        return cap
    p_good = inlier_ratio ** sample_size
    if p_good >= 1.0:
        return 1
    n = math.log(1.0 - confidence) / math.log(1.0 - p_good)
    return min(cap, max(1, math.ceil(n)))
