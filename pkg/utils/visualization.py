import logging
from pathlib import Path

import plotly.express as px
import plotly.graph_objects as go

from errors import InputError, ReportIOError
from utils.analytics import StudyAnalytics

logger = logging.getLogger(__name__)

FIGURE_KINDS = ("ordering", "ratios", "layers", "bias", "forgetting", "individual")


class StudyVisualizer:
    def __init__(self, rows):
        self.analytics = StudyAnalytics(rows)
        self.df = self.analytics.df

    def create_visualization(self, kind, title=None):
        """Figure for one study's rows."""
        try:
            if kind == "ordering":
                return self._ordering_figure(title or "Error by position added")
            elif kind == "ratios":
                return self._ratio_figure(title or "Error before pruning, after pruning and after retraining")
            elif kind == "layers":
                return self._layer_figure(title or "Error by trainable layers")
            elif kind == "bias":
                return self._bias_figure(title or "Shared vs per-task biases")
            elif kind == "forgetting":
                return self._forgetting_figure(title or "Error of earlier tasks as tasks are added")
            elif kind == "individual":
                return self._individual_figure(title or "Each task on its own network")
            else:
                raise InputError(f"Unsupported figure kind: {kind}")
        except InputError:
            raise
        except Exception as e:
            raise InputError(f"Error creating {kind} figure: {str(e)}") from e

    def _ordering_figure(self, title):
        summary = self.analytics.task_position_summary()
        fig = px.bar(
            summary,
            x="position",
            y="mean",
            color="task",
            barmode="group",
            error_y="sem",
            title=title,
            template="plotly_white",
        )
        fig.update_layout(xaxis_title="Position added", yaxis_title="Top-1 error (%)")
        return fig

    def _ratio_figure(self, title):
        summary = self.analytics.ratio_summary()
        fig = go.Figure()
        for column, name in (("pre_prune_error", "Before pruning"),
                             ("post_prune_error", "After pruning"),
                             ("post_retrain_error", "After retraining")):
            fig.add_trace(go.Scatter(x=summary["ratio"], y=summary[column], name=name, mode="lines+markers"))
        fig.update_layout(title=title, xaxis_title="Pruning ratio", yaxis_title="Top-1 error (%)",
                          template="plotly_white")
        return fig

    def _layer_figure(self, title):
        summary = self.analytics.layer_summary()
        return px.bar(summary, x="layers", y="mean", error_y="sem", title=title, template="plotly_white")

    def _bias_figure(self, title):
        melted = self.df.melt(id_vars=["task"], value_vars=["shared_error", "separate_error"],
                              var_name="mode", value_name="error")
        summary = melted.groupby(["task", "mode"], sort=True)["error"].mean().reset_index()
        return px.bar(summary, x="task", y="error", color="mode", barmode="group", title=title,
                      template="plotly_white")

    def _forgetting_figure(self, title):
        frame = self.df.sort_values(["task", "after_position"])
        return px.line(frame, x="after_position", y="delta", color="task", line_group="seed",
                       markers=True, title=title, template="plotly_white")

    def _individual_figure(self, title):
        summary = self.df.groupby("task", sort=True)["error"].mean().reset_index()
        return px.bar(summary, x="task", y="error", title=title, template="plotly_white")

    @staticmethod
    def write_html(fig, path):
        try:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            fig.write_html(str(path), include_plotlyjs="cdn")
        except OSError as e:
            raise ReportIOError(f"Error writing figure {path}: {str(e)}") from e
        logger.info("Wrote figure to %s", path)
