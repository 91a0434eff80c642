import math

import pytest

from errors import InputError, ReportIOError
from harness import BiasRow, ForgettingRow, LayerAblationRow, RatioRow
from utils.analytics import StudyAnalytics
from utils.visualization import FIGURE_KINDS, StudyVisualizer

ORDERING_ROWS = [
    {"seed": 0, "task": "a", "position": 1, "error": 10.0},
    {"seed": 0, "task": "b", "position": 2, "error": 20.0},
    {"seed": 1, "task": "b", "position": 1, "error": 14.0},
    {"seed": 1, "task": "a", "position": 2, "error": 16.0},
]

RATIO_ROWS = [RatioRow(0, "b", 0.5, 10.0, 12.0, 10.5, 0.30, 0.35, 0.28),
              RatioRow(0, "b", 0.9, 10.0, 40.0, 15.0, 0.30, 1.10, 0.45),
              RatioRow(1, "b", 0.5, 12.0, 14.0, 11.5, 0.32, 0.37, 0.29),
              RatioRow(1, "b", 0.9, 12.0, 44.0, 17.0, 0.32, 1.20, 0.55)]

BIAS_ROWS = [BiasRow(0, "a>b", 1, "a", 10.0, 11.0, 1.0, 0, 160),
             BiasRow(0, "a>b", 2, "b", 20.0, 22.5, 2.5, 0, 160),
             BiasRow(1, "a>b", 1, "a", 30.0, 29.0, -1.0, 0, 160)]

FORGETTING_ROWS = [ForgettingRow(0, "a>b>c", "a", 1, "b", 2, 10.0, 0.0),
                   ForgettingRow(0, "a>b>c", "a", 1, "c", 3, 10.0, 0.0),
                   ForgettingRow(0, "a>b>c", "b", 2, "c", 3, 20.0, 0.0)]


def test_position_summary():
    summary = StudyAnalytics(ORDERING_ROWS).position_summary()
    assert summary["position"].tolist() == [1, 2]
    assert summary["mean"].tolist() == [12.0, 18.0]
    assert summary["runs"].tolist() == [2, 2]
    assert summary["std"].iloc[0] == pytest.approx(math.sqrt(8.0))
    assert summary["sem"].iloc[0] == pytest.approx(2.0)


def test_task_position_summary_single_runs_have_zero_spread():
    summary = StudyAnalytics(ORDERING_ROWS).task_position_summary()
    assert len(summary) == 4
    assert (summary["std"] == 0.0).all() and (summary["sem"] == 0.0).all()


def test_ratio_summary():
    summary = StudyAnalytics(RATIO_ROWS).ratio_summary()
    assert summary["ratio"].tolist() == [0.5, 0.9]
    assert summary["post_prune_error"].tolist() == [13.0, 42.0]
    assert summary["recovered"].tolist() == [True, True]
    assert summary["post_prune_loss"].tolist() == pytest.approx([0.36, 1.15])
    assert summary["loss_recovered"].tolist() == [True, True]


def test_ratio_summary_without_losses():
    rows = [{"ratio": 0.5, "pre_prune_error": 10.0, "post_prune_error": 30.0, "post_retrain_error": 35.0}]
    summary = StudyAnalytics(rows).ratio_summary()
    assert summary["recovered"].tolist() == [False]
    assert "loss_recovered" not in summary.columns


def test_layer_summary():
    rows = [LayerAblationRow(0, "b", "classifier_only", 30.0), LayerAblationRow(1, "b", "classifier_only", 34.0),
            LayerAblationRow(0, "b", "all", 12.0)]
    summary = StudyAnalytics(rows).layer_summary().set_index("layers")
    assert summary.loc["classifier_only", "mean"] == 32.0
    assert summary.loc["all", "runs"] == 1


def test_bias_comparison():
    comparison = StudyAnalytics(BIAS_ROWS).bias_comparison()
    assert comparison["pairs"] == 3
    assert comparison["mean_gap"] == pytest.approx(2.5 / 3)
    assert comparison["max_abs_gap"] == 2.5
    assert 0.0 < comparison["p_value"] <= 1.0


def test_bias_comparison_identical_pairs_have_no_p_value():
    rows = [BiasRow(0, "a", 1, "a", 10.0, 10.0, 0.0, 0, 0), BiasRow(1, "a", 1, "a", 12.0, 12.0, 0.0, 0, 0)]
    comparison = StudyAnalytics(rows).bias_comparison()
    assert math.isnan(comparison["p_value"])
    assert comparison["max_abs_gap"] == 0.0


def test_forgetting_summary():
    summary = StudyAnalytics(FORGETTING_ROWS).forgetting_summary()
    assert summary["task"].tolist() == ["a", "b"]
    assert summary["checks"].tolist() == [2, 1]
    assert (summary["max_abs_delta"] == 0.0).all()
    assert StudyAnalytics([]).forgetting_summary().empty


@pytest.mark.parametrize("kind, rows", [
    ("ordering", ORDERING_ROWS),
    ("ratios", RATIO_ROWS),
    ("layers", [LayerAblationRow(0, "b", "all", 12.0), LayerAblationRow(1, "b", "all", 14.0)]),
    ("bias", BIAS_ROWS),
    ("forgetting", FORGETTING_ROWS),
    ("individual", [{"seed": 0, "task": "a", "error": 5.0, "model_bytes": 100}]),
])
def test_every_figure_kind(kind, rows):
    assert kind in FIGURE_KINDS
    fig = StudyVisualizer(rows).create_visualization(kind)
    assert len(fig.data) > 0


def test_unknown_figure_kind():
    with pytest.raises(InputError):
        StudyVisualizer(ORDERING_ROWS).create_visualization("heatmap")


def test_missing_columns_are_input_errors():
    with pytest.raises(InputError):
        StudyVisualizer(ORDERING_ROWS).create_visualization("bias")


def test_write_html(tmp_path):
    fig = StudyVisualizer(RATIO_ROWS).create_visualization("ratios")
    path = tmp_path / "figures" / "ratios.html"
    StudyVisualizer.write_html(fig, path)
    assert "plotly" in path.read_text(encoding="utf-8").lower()


def test_write_html_failure(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    fig = StudyVisualizer(RATIO_ROWS).create_visualization("ratios")
    with pytest.raises(ReportIOError):
        StudyVisualizer.write_html(fig, blocker / "ratios.html")
