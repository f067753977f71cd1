import json
import math
from typing import NamedTuple

import pandas as pd
import pytest

from src.data_transformer import MetricsTransformer


class Row(NamedTuple):
    step: int
    total: float
    eval_acc: float


@pytest.fixture
def rows():
    """Fixture to provide metric rows, one with a missing eval accuracy."""
    return [Row(5, 1.5, 0.6), Row(10, 1.2, float("nan"))]


def test_to_dataframe(rows):
    """Tests that rows become a table with the given column order."""
    df = MetricsTransformer.using(rows, ["step", "total", "eval_acc"]).to_dataframe()
    assert list(df.columns) == ["step", "total", "eval_acc"]
    assert df["step"].tolist() == [5, 10]
    assert math.isnan(df["eval_acc"].iloc[1])


def test_export_writes_csv_and_jsonl(rows, tmp_path):
    """Tests that both files are written and NaN becomes null in JSON lines."""
    csv_path, jsonl_path = tmp_path / "m.csv", tmp_path / "m.jsonl"
    MetricsTransformer.using(rows, list(Row._fields)).export(csv_path, jsonl_path)

    assert pd.read_csv(csv_path)["total"].tolist() == [1.5, 1.2]
    lines = [json.loads(line) for line in jsonl_path.read_text().splitlines()]
    assert lines[0] == {"step": 5, "total": 1.5, "eval_acc": 0.6}
    assert lines[1]["eval_acc"] is None


def test_to_long():
    """Tests the long format of two runs."""
    frames = {
        "a": pd.DataFrame({"step": [1, 2], "x": [0.1, 0.2], "y": [1.0, 2.0]}),
        "b": pd.DataFrame({"step": [1], "x": [0.3], "y": [3.0]}),
    }
    df = MetricsTransformer.to_long(frames, ["x", "y"])
    assert list(df.columns) == ["run", "step", "metric", "value"]
    assert len(df) == 6
    assert df[(df["run"] == "b") & (df["metric"] == "y")]["value"].tolist() == [3.0]


def test_to_long_missing_column():
    """Tests that a run without a requested metric raises a ValueError."""
    with pytest.raises(ValueError, match="has no column"):
        MetricsTransformer.to_long({"a": pd.DataFrame({"step": [1]})}, ["x"])


def test_to_long_no_runs():
    """Tests that no runs give an empty long table."""
    assert MetricsTransformer.to_long({}, ["x"]).empty


def test_add_smoothing_per_curve():
    """Tests that the rolling mean restarts for every run and metric."""
    df = pd.DataFrame(
        {
            "run": ["a", "a", "a", "b", "b"],
            "step": [1, 2, 3, 1, 2],
            "metric": ["x"] * 5,
            "value": [1.0, 3.0, 5.0, 10.0, 20.0],
        }
    )
    smoothed = MetricsTransformer.add_smoothing(df, 2)["smoothed"].tolist()
    assert smoothed == pytest.approx([1.0, 2.0, 4.0, 10.0, 15.0])


def test_final_rows():
    """Tests that the last row of each run is kept and empty runs are skipped."""
    frames = {
        "a": pd.DataFrame({"step": [1, 2], "x": [0.1, 0.2]}),
        "b": pd.DataFrame({"step": [], "x": []}),
    }
    final = MetricsTransformer.final_rows(frames)
    assert final["run"].tolist() == ["a"]
    assert final["x"].tolist() == [0.2]
    assert MetricsTransformer.final_rows({}).empty
