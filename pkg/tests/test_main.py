import json

import pandas as pd
import pytest

from src.main import EXIT_CHECK_FAILED, EXIT_IO, EXIT_OK, EXIT_USAGE, main


def _config(**generator) -> dict:
    return {
        "data": {"generator": {"seed": 0, "n": 100, "d_x": 4, "d_y": 3, "k": 3, "j_true": 3, **generator}},
        "model": {"k": 3, "j": 2, "hidden": 6, "head_hidden": 3},
        "train": {"epochs": 1, "batch_size": 16, "learning_rate": 0.01, "eval_interval": 3, "progress": False},
        "bound": {"mc_samples": 2},
    }


@pytest.fixture
def config_file(tmp_path):
    """A small run configuration on disk."""
    path = tmp_path / "config.json"
    path.write_text(json.dumps(_config()))
    return path


@pytest.fixture
def data_dir(tmp_path, config_file):
    """A generated dataset directory."""
    out = tmp_path / "data"
    assert main(["gen-data", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture
def run_dir(tmp_path, config_file, data_dir):
    """A trained variational model."""
    out = tmp_path / "run"
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out)]
    assert main(args) == EXIT_OK
    return out


def test_gen_data(data_dir):
    """Tests the generated files and the 90/10 split."""
    assert len((data_dir / "train.jsonl").read_text().splitlines()) == 90
    assert len((data_dir / "eval.jsonl").read_text().splitlines()) == 10
    manifest = json.loads((data_dir / "manifest.json").read_text())
    assert manifest["schema"] == {"d_x": 4, "d_y": 3, "k": 3}
    echo = json.loads((data_dir / "run.json").read_text())
    assert echo["command"] == "gen-data"
    assert "timestamp" not in echo


def test_train_outputs(tmp_path, config_file, data_dir, capsys):
    """Tests that training writes the checkpoint and metric tables and prints the final row."""
    capsys.readouterr()
    out = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out)]) == EXIT_OK
    assert (out / "checkpoint.json").exists()
    df = pd.read_csv(out / "metrics.csv")
    assert df["step"].tolist() == [3, 6]
    final = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert final["step"] == 6


def test_train_is_reproducible(tmp_path, config_file, data_dir):
    """Tests that two default runs with the same seed write identical metrics."""
    for name in ("a", "b"):
        args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / name)]
        assert main(args + ["--seed", "3"]) == EXIT_OK
    for name in ("metrics.csv", "checkpoint.json", "run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_train_wall_clock(tmp_path, config_file, data_dir):
    """Tests that --wall-clock turns on the elapsed-time column."""
    out = tmp_path / "timed"
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out), "--wall-clock"]
    assert main(args) == EXIT_OK
    assert json.loads((out / "run.json").read_text())["config"]["train"]["record_wall_clock"] is True


def test_train_baseline(tmp_path, config_file, data_dir):
    """Tests the --model override and its echo in run.json."""
    out = tmp_path / "baseline"
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out), "--model", "baseline"]
    assert main(args) == EXIT_OK
    echo = json.loads((out / "run.json").read_text())
    assert echo["config"]["train"]["model_kind"] == "baseline"


def test_eval(run_dir, data_dir, tmp_path):
    """Tests the accuracy report of a checkpoint."""
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint.json"), "--data", str(data_dir), "--out", str(tmp_path / "e")]
    assert main(args) == EXIT_OK
    report = json.loads((tmp_path / "e" / "eval.json").read_text())
    assert 0.0 <= report["eval_acc"] <= 1.0
    assert report["train_weight_recovery"] >= 0.0
    assert len(report["weight_profile"]) == 3


def test_eval_schema_mismatch(tmp_path, run_dir, capsys):
    """Tests that a checkpoint applied to data of other dimensions exits with code 3."""
    capsys.readouterr()
    other = tmp_path / "other.json"
    other.write_text(json.dumps(_config(d_x=5)))
    assert main(["gen-data", "--config", str(other), "--out", str(tmp_path / "wide")]) == EXIT_OK
    args = ["eval", "--checkpoint", str(run_dir / "checkpoint.json"), "--data", str(tmp_path / "wide")]
    assert main(args) == EXIT_IO
    assert "does not match dataset schema" in capsys.readouterr().err


def test_train_rejects_mixed_score_lengths(tmp_path, config_file, data_dir, capsys):
    """Tests that a record with a longer score vector exits with code 3 and names the line."""
    lines = (data_dir / "train.jsonl").read_text().splitlines()
    record = json.loads(lines[1])
    record["scores_pos"].append(0.0)
    record["scores_neg"].append(0.0)
    (data_dir / "train.jsonl").write_text("\n".join([lines[0], json.dumps(record), *lines[2:]]) + "\n")
    capsys.readouterr()
    args = ["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(tmp_path / "bad")]
    assert main(args) == EXIT_IO
    assert "train.jsonl:2: Score length 4" in capsys.readouterr().err


def test_bound(run_dir, data_dir, tmp_path):
    """Tests the bound report of a trained model."""
    out = tmp_path / "bound"
    args = ["bound", "--checkpoint", str(run_dir / "checkpoint.json"), "--data", str(data_dir), "--out", str(out)]
    assert main(args + ["--delta", "0.1"]) == EXIT_OK
    report = json.loads((out / "bound.json").read_text())
    assert report["n"] == 90
    assert report["delta"] == 0.1
    assert report["bound"] >= report["empirical_risk"]


def test_bound_risk_override(run_dir, data_dir, capsys):
    """Tests that the hidden risk override fixes the empirical risk."""
    capsys.readouterr()
    args = ["bound", "--checkpoint", str(run_dir / "checkpoint.json"), "--data", str(data_dir), "--risk-override", "0"]
    assert main(args) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["empirical_risk"] == 0.0


def test_bound_rejects_baseline(tmp_path, config_file, data_dir, capsys):
    """Tests that the bound of a baseline checkpoint is a usage error."""
    out = tmp_path / "baseline"
    main(["train", "--config", str(config_file), "--data", str(data_dir), "--out", str(out), "--model", "baseline"])
    capsys.readouterr()
    assert main(["bound", "--checkpoint", str(out / "checkpoint.json"), "--data", str(data_dir)]) == EXIT_USAGE
    assert "variational model only" in capsys.readouterr().err


@pytest.mark.parametrize(
    "args",
    [["bound"], ["bound", "--trials", "5"], ["bound", "--delta", "1.5", "--trials", "20"]],
)
def test_bound_usage_errors(args, config_file):
    """Tests that missing checkpoints and invalid trial settings exit with code 2."""
    assert main(args + ["--config", str(config_file)]) == EXIT_USAGE


def test_gradcheck(capsys):
    """Tests that all gradient checks pass."""
    assert main(["gradcheck"]) == EXIT_OK
    assert "All gradient checks passed." in capsys.readouterr().out


def test_gradcheck_with_fault(capsys):
    """Tests that a flipped derivative fails with code 1 and names the offender."""
    assert main(["gradcheck", "--inject-fault", "Tanh"]) == EXIT_CHECK_FAILED
    assert "FAIL: worst offender" in capsys.readouterr().out


def test_plot(run_dir, tmp_path):
    """Tests that curves and summaries are exported as HTML."""
    curves = tmp_path / "curves.html"
    assert main(["plot", str(run_dir), "--metric", "train_acc", "total", "--out", str(curves), "--smooth", "2"]) == EXIT_OK
    assert curves.exists()
    summary = tmp_path / "summary.html"
    assert main(["plot", str(run_dir), "--kind", "summary", "--out", str(summary)]) == EXIT_OK
    assert summary.exists()


def test_sweep(tmp_path, config_file, data_dir):
    """Tests one run per lambda and the summary table."""
    out = tmp_path / "sweep"
    args = ["sweep", "--config", str(config_file), "--data", str(data_dir), "--out", str(out), "--lambdas", "0", "1"]
    assert main(args) == EXIT_OK
    summary = pd.read_csv(out / "summary.csv")
    assert summary["run"].tolist() == ["lam=0", "lam=1"]
    assert (out / "lam=0" / "metrics.csv").exists()
    assert (pd.read_csv(out / "lam=0" / "metrics.csv")["sup"] == 0.0).all()


def test_missing_config_file(tmp_path, capsys):
    """Tests that an unreadable config exits with code 3."""
    assert main(["gen-data", "--config", str(tmp_path / "nope.json")]) == EXIT_IO
    assert capsys.readouterr().err.startswith("error:")


def test_unknown_config_key(tmp_path):
    """Tests that an unknown config key exits with code 2."""
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"train": {"epoch": 3}}))
    assert main(["gen-data", "--config", str(path), "--out", str(tmp_path / "x")]) == EXIT_USAGE


def test_argument_errors():
    """Tests that argparse usage errors exit with code 2."""
    with pytest.raises(SystemExit) as excinfo:
        main(["train", "--model", "gpt"])
    assert excinfo.value.code == 2
