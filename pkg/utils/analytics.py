import logging
from dataclasses import asdict

import numpy as np
import pandas as pd
from scipy import stats

logger = logging.getLogger(__name__)


class StudyAnalytics:
    """Aggregates over study rows (dataclass rows or dicts)."""

    def __init__(self, rows):
        records = [asdict(row) if hasattr(row, "__dataclass_fields__") else dict(row) for row in rows]
        self.df = pd.DataFrame(records)

    def _grouped(self, by, column):
        frame = self.df.groupby(by, sort=True)[column].agg(
            mean="mean",
            std=lambda s: s.std(ddof=1) if len(s) > 1 else 0.0,
            sem=lambda s: float(stats.sem(s)) if len(s) > 1 else 0.0,
            runs="count",
        )
        return frame.reset_index()

    def position_summary(self, column="error"):
        """Error statistics by the position a task was added at."""
        return self._grouped("position", column)

    def task_position_summary(self, column="error"):
        """Per-task error by position, the view that isolates ordering effects from task difficulty."""
        return self._grouped(["task", "position"], column)

    def ratio_summary(self):
        """Mean three-phase error (and loss, when recorded) trajectory per pruning ratio."""
        phases = [f"{phase}_{kind}" for kind in ("error", "loss")
                  for phase in ("pre_prune", "post_prune", "post_retrain")]
        phases = [column for column in phases if column in self.df.columns]
        frame = self.df.groupby("ratio", sort=True)[phases].mean().reset_index()
        frame["recovered"] = frame["post_retrain_error"] <= frame["post_prune_error"]
        if "post_retrain_loss" in frame.columns:
            frame["loss_recovered"] = frame["post_retrain_loss"] <= frame["post_prune_loss"]
        return frame

    def layer_summary(self):
        return self._grouped("layers", "error")

    def bias_comparison(self):
        """
        Paired comparison of shared against per-task biases.

        Returns:
            dict with both means, the mean gap, the largest absolute gap and
            the paired t-test p-value (NaN when it is undefined).
        """
        shared = self.df["shared_error"].to_numpy(dtype=float)
        separate = self.df["separate_error"].to_numpy(dtype=float)
        p_value = float("nan")
        if len(shared) > 1 and np.any(shared != separate):
            try:
                p_value = float(stats.ttest_rel(shared, separate).pvalue)
            except Exception as e:
                logger.warning("Could not run paired t-test: %s", str(e))
        return {
            "shared_mean": float(shared.mean()) if len(shared) else float("nan"),
            "separate_mean": float(separate.mean()) if len(separate) else float("nan"),
            "mean_gap": float((separate - shared).mean()) if len(shared) else float("nan"),
            "max_abs_gap": float(np.abs(separate - shared).max()) if len(shared) else float("nan"),
            "p_value": p_value,
            "pairs": int(len(shared)),
        }

    def forgetting_summary(self):
        """Largest absolute error change of each task after it froze; all zeros when packing held."""
        if self.df.empty:
            return pd.DataFrame(columns=["task", "max_abs_delta", "checks"])
        return (self.df.assign(abs_delta=self.df["delta"].abs())
                .groupby("task", sort=True)["abs_delta"]
                .agg(max_abs_delta="max", checks="count")
                .reset_index())
