import pytest

from arplayback.plots import render_report_figures
from arplayback.simulator import ScenarioSpec, run_monte_carlo


@pytest.mark.parametrize("stages", [{}, {"playback": False, "relative": False, "handeye": False}])
def test_figures_are_written(tmp_path, stages):
    spec = ScenarioSpec.from_preset("paper-comparable", samples=20, relative_poses=3, handeye_train=6,
                                    handeye_test=3, n_seeds=2, stages=stages)
    paths = render_report_figures(run_monte_carlo(spec), tmp_path, "r")
    assert paths
    for p in paths:
        assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
