"""Property suites over at least a thousand generated cases each."""

import numpy as np
from hypothesis import HealthCheck, assume, given, settings
from hypothesis import strategies as st

from arplayback.calibration import PointPairSet, kabsch_umeyama
from arplayback.geometry import angular_distance, quat_multiply, quat_normalize

N_CASES = 1000
unit = st.floats(-1.0, 1.0, allow_nan=False)
quat = st.tuples(unit, unit, unit, unit).filter(lambda v: np.linalg.norm(v) > 1e-3).map(
    lambda v: quat_normalize(np.array(v)))
cases = settings(max_examples=N_CASES, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@cases
@given(quat, quat)
def test_angular_distance_double_cover(a, b):
    d = angular_distance(a, b)
    assert 0.0 <= d <= 180.0
    for sa in (1, -1):
        for sb in (1, -1):
            assert abs(angular_distance(sa * a, sb * b) - d) < 1e-9


@cases
@given(quat, quat, quat)
def test_angular_distance_metric_axioms(a, b, c):
    ab, ba = angular_distance(a, b), angular_distance(b, a)
    assert abs(ab - ba) < 1e-9
    assert angular_distance(a, a) < 1e-6
    assert ab + angular_distance(b, c) >= angular_distance(a, c) - 1e-9


@cases
@given(quat, quat)
def test_angular_distance_zero_only_for_same_rotation(a, b):
    if angular_distance(a, b) < 1e-7:
        assert min(np.linalg.norm(a - b), np.linalg.norm(a + b)) < 1e-6


@cases
@given(quat, quat, quat)
def test_angular_distance_left_invariant(g, a, b):
    ga, gb = quat_multiply(g, a), quat_multiply(g, b)
    assert abs(angular_distance(ga, gb) - angular_distance(a, b)) < 1e-8


points = st.lists(st.tuples(*(st.floats(-100, 100, allow_nan=False),) * 3), min_size=4, max_size=10)
mix = st.floats(0.0, 1.0)


def _spread(p):
    sv = np.linalg.svd(p - p.mean(axis=0), compute_uv=False)
    return sv[1] / max(sv[0], 1e-300)


@cases
@given(points, mix, st.integers(0, 2**32 - 1))
def test_kabsch_rotation_is_proper(src, weight, seed):
    src = np.array(src)
    assume(_spread(src) > 1e-6)
    # blend a mirror image of the cloud with random clutter to tempt a reflection
    clutter = np.random.default_rng(seed).uniform(-100, 100, src.shape)
    dst = weight * (src * [-1.0, 1.0, 1.0]) + (1.0 - weight) * clutter
    assume(_spread(dst) > 1e-6)
    r = kabsch_umeyama(PointPairSet(dst, src)).rotation_matrix
    assert abs(np.linalg.det(r) - 1.0) < 1e-9
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-9)
