from pathlib import Path

import pandas as pd

from dashboard.app import group_curve_figure, list_runs, projection_figure

GROUPS = pd.DataFrame({
    "strategy": ["fedavg"] * 4 + ["fedvc_em"] * 2,
    "group_id": [0, 0, 1, 1, 0, 0],
    "round": [1, 0, 0, 1, 0, 1],
    "mean": [0.6, 0.4, 0.5, 0.7, 0.5, 0.8],
    "std": [0.1, 0.1, 0.0, 0.05, 0.1, 0.1],
    "clients": [2, 2, 1, 1, 2, 2],
})


def test_list_runs_needs_metrics(tmp_path: Path) -> None:
    (tmp_path / "done").mkdir()
    (tmp_path / "done" / "metrics.csv").write_text("run_id\n", encoding="utf-8")
    (tmp_path / "empty").mkdir()
    assert list_runs(tmp_path) == [tmp_path / "done"]
    assert list_runs(tmp_path / "missing") == []


def test_group_curves_have_band_and_line_per_group() -> None:
    fig = group_curve_figure(GROUPS, "fedavg")
    assert len(fig.data) == 4
    line = fig.data[1]
    assert list(line.x) == [0, 1]
    assert list(line.y) == [0.4, 0.6]
    assert group_curve_figure(GROUPS, "local_only") is None


def test_projection_scatter_per_group() -> None:
    projections = pd.DataFrame({
        "strategy": ["fedvc_em"] * 3,
        "group_id": [0, 1, 1],
        "x": [0.0, 1.0, 2.0],
        "y": [0.0, -1.0, 1.0],
    })
    fig = projection_figure(projections, "fedvc_em")
    assert [trace.name for trace in fig.data] == ["group 0", "group 1"]
    assert projection_figure(projections, "fedavg") is None
