from abc import ABC, abstractmethod
from pathlib import Path
from typing import Self

import pandas as pd
import plotly.express as px

from src.data_transformer import MetricsTransformer


class Plotter(ABC):
    """
    Base of the metric-curve figures.

    A plotter holds the metric tables of one or more runs, keyed by run
    label, and builds a single plotly figure from them. ``plot`` is the
    only step a subclass supplies.

    Attributes:
        _data (dict[str, pd.DataFrame]): Metric tables keyed by run label.
        _figure: Figure built by the last ``plot`` call, None before it.
        _transformer (MetricsTransformer): Reshapes tables for plotting.
    """

    @classmethod
    def using(cls, data: dict[str, pd.DataFrame]) -> Self:
        """Wrap the metric tables of a sweep; nothing is drawn yet."""
        obj = cls()
        obj._data = data
        obj._figure = None
        obj._transformer = MetricsTransformer
        return obj

    @abstractmethod
    def plot(self, metrics: list[str], *args, **kwargs) -> Self:
        """
        Build the figure for the metric columns ``metrics``.

        Args:
            metrics (list[str]): Columns shared by every run table.

        Returns:
            Self: The plotter instance for method chaining.
        """
        raise NotImplementedError("Subclasses must implement this method.")

    def _built_figure(self):
        if self._figure is None:
            raise ValueError("No figure yet; call plot() before show() or export().")
        return self._figure

    def show(self) -> Self:
        self._built_figure().show()
        return self

    def export(self, filename: str | Path) -> Self:
        """
        Save the figure as HTML that loads plotly.js from its CDN.

        Args:
            filename (str | Path): Target ``.html`` path.

        Returns:
            Self: The plotter instance for method chaining.
        """
        self._built_figure().write_html(str(filename), include_plotlyjs="cdn")
        return self


class CurvePlotter(Plotter):
    """
    Plotter for metric curves over optimizer steps.

    One color per run and one dash style per metric, so accuracy or KL
    curves of several runs can be compared on one chart.
    """

    def plot(self, metrics: list[str], *args, **kwargs) -> Self:
        """
        Create a line plot of ``metrics`` against the step.

        Args:
            metrics (list[str]): Metric columns to plot.
            **kwargs: Optional keyword arguments:
                - title (str): Title of the plot.
                - y_label (str): Label for the y-axis.
                - smooth_window (int): Rolling-mean window applied per curve.

        Returns:
            Self: The plotter instance for method chaining.
        """
        title = kwargs.get("title", ", ".join(metrics))
        y_label = kwargs.get("y_label", "value")
        smooth_window = kwargs.get("smooth_window")

        df = self._transformer.to_long(self._data, metrics)
        y_axis = "value"
        if smooth_window:
            df = self._transformer.add_smoothing(df, smooth_window)
            y_axis = "smoothed"

        self._figure = px.line(
            df,
            x="step",
            y=y_axis,
            color="run",
            line_dash="metric",
            labels={"step": "Step", y_axis: y_label},
            title=title,
        )
        return self


class SummaryPlotter(Plotter):
    """
    Plotter for the final metrics of a sweep.

    Draws one grouped bar per run for each requested metric, taken from the
    last row of every metric table.
    """

    def plot(self, metrics: list[str], *args, **kwargs) -> Self:
        """
        Create a grouped bar chart of the final values of ``metrics``.

        Args:
            metrics (list[str]): Metric columns to plot.
            **kwargs: Optional keyword arguments:
                - title (str): Title of the plot.

        Returns:
            Self: The plotter instance for method chaining.
        """
        title = kwargs.get("title", "Final metrics")
        final = self._transformer.final_rows(self._data)
        df = final.melt(id_vars=["run"], value_vars=metrics, var_name="metric", value_name="value")
        self._figure = px.bar(
            df,
            x="run",
            y="value",
            color="metric",
            barmode="group",
            labels={"run": "Run", "value": "Final value"},
            title=title,
        )
        return self
