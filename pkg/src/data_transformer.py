from pathlib import Path
from typing import NamedTuple, Self

import pandas as pd


class MetricsTransformer:
    """Transforms metric rows into tables suitable for export and plotting."""

    @classmethod
    def using(cls, data: list[NamedTuple], columns: list[str]) -> Self:
        """Factory method to create a transformer with metric rows."""
        obj = cls()
        obj._data = data
        obj._columns = columns
        return obj

    def to_dataframe(self) -> pd.DataFrame:
        """
        Convert the metric rows to a pandas DataFrame.

        Returns:
            DataFrame with one column per metric field, in field order.
        """
        return pd.DataFrame([tuple(row) for row in self._data], columns=self._columns)

    def export(self, csv_path: str | Path, jsonl_path: str | Path) -> Self:
        """Write the table as CSV and as JSON lines (NaN becomes null)."""
        df = self.to_dataframe()
        df.to_csv(csv_path, index=False)
        df.to_json(jsonl_path, orient="records", lines=True)
        return self

    @staticmethod
    def to_long(frames: dict[str, pd.DataFrame], metrics: list[str], x_column: str = "step") -> pd.DataFrame:
        """
        Stack the metrics of several runs into long format.

        Args:
            frames: Metric tables keyed by run label.
            metrics: Columns to keep.
            x_column: Column shared by every run, used as the x axis.

        Returns:
            DataFrame with columns ``run``, ``x_column``, ``metric``, ``value``.

        Raises:
            ValueError: If a run lacks one of the requested columns.
        """
        parts = []
        for run, df in frames.items():
            missing = sorted(set(metrics + [x_column]) - set(df.columns))
            if missing:
                raise ValueError(f"Run '{run}' has no column(s) {missing}")
            long = df.melt(id_vars=[x_column], value_vars=metrics, var_name="metric", value_name="value")
            long.insert(0, "run", run)
            parts.append(long)
        if not parts:
            return pd.DataFrame(columns=["run", x_column, "metric", "value"])
        return pd.concat(parts, ignore_index=True)

    @staticmethod
    def add_smoothing(df: pd.DataFrame, window: int, value_column: str = "value") -> pd.DataFrame:
        """
        Add a trailing rolling mean of ``value_column`` per run and metric.

        Args:
            df: Long-format table from ``to_long``.
            window: Number of rows averaged.

        Returns:
            DataFrame with an added ``smoothed`` column.
        """
        df["smoothed"] = df.groupby(["run", "metric"])[value_column].transform(
            lambda s: s.rolling(window, min_periods=1).mean()
        )
        return df

    @staticmethod
    def final_rows(frames: dict[str, pd.DataFrame]) -> pd.DataFrame:
        """Last row of every run, labeled by a leading ``run`` column."""
        rows = []
        for run, df in frames.items():
            if df.empty:
                continue
            last = df.iloc[[-1]].copy()
            last.insert(0, "run", run)
            rows.append(last)
        return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame()
