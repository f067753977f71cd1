import argparse
import json
import logging
import platform
import sys
from dataclasses import replace
from importlib import metadata
from pathlib import Path

import numpy as np
import pandas as pd

from src.config import BoundConfig, ModelKind, RunConfig, SupVariant
from src.data_transformer import MetricsTransformer
from src.errors import ConfigError, DomainError, SchemaError
from src.gradcheck import run_checks
from src.model import RewardModel, VrmModel, load_checkpoint
from src.pacbayes import evaluate_bound, validity_trial
from src.plotter import CurvePlotter, SummaryPlotter
from src.synthdata import SplitDataset, generate
from src.training import Trainer, pairwise_accuracy, weight_profile, weight_recovery

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _versions() -> dict:
    try:
        package = metadata.version("vrm-desk")
    except metadata.PackageNotFoundError:
        package = "unknown"
    return {"vrm-desk": package, "python": platform.python_version(), "numpy": np.__version__}


def write_run_echo(out_dir: Path, command: str, config: RunConfig) -> None:
    """Write ``run.json`` with the resolved config and versions (no timestamp)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = {"command": command, "config": config.to_dict(), "seed": config.train.seed, "versions": _versions()}
    (out_dir / "run.json").write_text(json.dumps(echo, indent=2, sort_keys=True))


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Load ``--config`` (defaults otherwise) and apply the command-line overrides."""
    config = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return config.with_overrides(
        train={
            "model_kind": getattr(args, "model", None),
            "lam": getattr(args, "lam", None),
            "sup_variant": getattr(args, "sup_variant", None),
            "seed": getattr(args, "seed", None),
            "record_wall_clock": True if getattr(args, "wall_clock", False) else None,
            "progress": False if getattr(args, "no_progress", False) else None,
        },
        bound={
            "delta": getattr(args, "delta", None),
            "trials": getattr(args, "trials", None),
            "mc_samples": getattr(args, "mc_samples", None),
            "workers": getattr(args, "workers", None),
        },
    )


def load_dataset(config: RunConfig, data_dir: str | None, d_x: int | None = None, d_y: int | None = None) -> SplitDataset:
    """Dataset from ``--data DIR``, from the configured JSONL paths, or from the generator."""
    d_x = d_x or config.model.d_x
    d_y = d_y or config.model.d_y
    if data_dir is not None:
        data_dir = Path(data_dir)
        eval_path = data_dir / "eval.jsonl"
        return SplitDataset.load(data_dir / "train.jsonl", eval_path if eval_path.exists() else None, d_x, d_y)
    if config.data.train_path is not None:
        return SplitDataset.load(config.data.train_path, config.data.eval_path, d_x, d_y)
    return generate(config.data.generator)


def _check_compatible(model: RewardModel, dataset: SplitDataset) -> None:
    expected = {"d_x": model.hyper.d_x, "d_y": model.hyper.d_y}
    found = {"d_x": dataset.d_x, "d_y": dataset.d_y}
    if expected != found:
        raise SchemaError(f"Checkpoint schema {expected} does not match dataset schema {found}")


def cmd_gen_data(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if config.data.generator is None:
        raise ConfigError("gen-data needs a data.generator section")
    out_dir = Path(args.out or config.output)
    dataset = generate(config.data.generator)
    dataset.save(out_dir)
    write_run_echo(out_dir, "gen-data", config)
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or config.output)
    dataset = load_dataset(config, args.data)
    trainer = Trainer.using(dataset, config.train, config.model).fit()
    write_run_echo(out_dir, "train", config)
    trainer.export(out_dir)
    final = trainer.rows[-1]
    print(json.dumps({"step": final.step, "train_acc": final.train_acc, "eval_acc": final.eval_acc}))
    return EXIT_OK


def accuracy_report(model: RewardModel, dataset: SplitDataset) -> dict:
    """Pairwise accuracy per split, plus weight recovery and profile for the variational model."""
    report: dict = {"kind": str(model.kind)}
    for split, examples in (("train", dataset.train), ("eval", dataset.eval)):
        if not examples:
            continue
        report[f"{split}_acc"] = pairwise_accuracy(model, examples)
        if isinstance(model, VrmModel) and all(e.truth is not None for e in examples):
            report[f"{split}_weight_recovery"] = weight_recovery(model, examples)
    if isinstance(model, VrmModel):
        report["weight_profile"] = weight_profile(model, dataset.train or dataset.eval).tolist()
    return report


def cmd_eval(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    dataset = load_dataset(config, args.data, model.hyper.d_x, model.hyper.d_y)
    _check_compatible(model, dataset)
    report = accuracy_report(model, dataset)
    if args.out:
        out_dir = Path(args.out)
        write_run_echo(out_dir, "eval", config)
        (out_dir / "eval.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    bound: BoundConfig = config.bound
    out_dir = Path(args.out) if args.out else None

    if bound.trials > 0:
        if config.data.generator is None:
            raise ConfigError("bound --trials needs a data.generator section")
        summary = validity_trial(
            config.data.generator,
            config.model,
            replace(config.train, progress=False),
            bound.trials,
            bound.delta,
            bound.mc_samples,
            bound.pool_factor,
            bound.workers,
            bound.seed,
        )
        if out_dir is not None:
            write_run_echo(out_dir, "bound", config)
            summary.to_frame().to_csv(out_dir / "trials.csv", index=False)
        print(json.dumps({"trials": bound.trials, "delta": bound.delta, "pass_rate": summary.pass_rate}))
        return EXIT_OK

    if args.checkpoint is None:
        raise ConfigError("bound needs --checkpoint unless --trials is given")
    model = load_checkpoint(args.checkpoint)
    if not isinstance(model, VrmModel):
        raise ConfigError("The generalization bound is defined for the variational model only")
    dataset = load_dataset(config, args.data, model.hyper.d_x, model.hyper.d_y)
    _check_compatible(model, dataset)
    report = evaluate_bound(
        model,
        dataset.train,
        bound.delta,
        bound.mc_samples,
        np.random.default_rng(bound.seed),
        config.train.prior_alpha0,
        args.risk_override,
    )
    text = report.to_json(config.to_dict())
    if out_dir is not None:
        write_run_echo(out_dir, "bound", config)
        (out_dir / "bound.json").write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = run_checks(seed=args.seed, inject_fault=args.inject_fault)
    for result in results:
        status = "PASS" if result.passed else "FAIL"
        print(f"{result.name:<24} {result.report.max_error:.3e}  (tol {result.tolerance:.0e})  {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        worst = max(failed, key=lambda r: r.report.max_error / r.tolerance)
        print(f"FAIL: worst offender {worst.name} ({worst.report.worst}, {worst.report.max_error:.3e})")
        return EXIT_CHECK_FAILED
    print("All gradient checks passed.")
    return EXIT_OK


def _read_runs(run_dirs: list[str]) -> dict[str, pd.DataFrame]:
    return {Path(run).name or run: pd.read_csv(Path(run) / "metrics.csv") for run in run_dirs}


def cmd_plot(args: argparse.Namespace) -> int:
    runs = _read_runs(args.runs)
    plotter = SummaryPlotter if args.kind == "summary" else CurvePlotter
    figure = plotter.using(runs).plot(args.metric, title=args.title or ", ".join(args.metric), smooth_window=args.smooth)
    figure.export(args.out)
    if args.show:
        figure.show()
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out_dir = Path(args.out or config.output)
    dataset = load_dataset(config, args.data)
    if args.lambdas:
        settings = {f"lam={lam:g}": {"lam": lam} for lam in args.lambdas}
    else:
        settings = {f"variant={v}": {"sup_variant": v} for v in args.variants}

    frames = {}
    for tag, change in settings.items():
        train_config = replace(config.train, **change)
        run_config = replace(config, train=train_config)
        trainer = Trainer.using(dataset, train_config, config.model).fit()
        write_run_echo(out_dir / tag, "sweep", run_config)
        trainer.export(out_dir / tag)
        frames[tag] = trainer.metrics
    summary = MetricsTransformer.final_rows(frames)[["run", "train_acc", "eval_acc", "sup_kl"]]
    summary.to_csv(out_dir / "summary.csv", index=False)
    print(summary.to_string(index=False))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vrm", description="Variational preference reward models at desk scale.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging.")
    commands = parser.add_subparsers(dest="command", required=True)

    def with_config(sub: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sub.add_argument("--config", help="Run configuration JSON.")
        sub.add_argument("--out", help="Output directory (overrides config.output).")
        return sub

    def with_training(sub: argparse.ArgumentParser) -> argparse.ArgumentParser:
        sub.add_argument("--data", help="Directory with train.jsonl and optional eval.jsonl.")
        sub.add_argument("--model", choices=[k.value for k in ModelKind])
        sub.add_argument("--lambda", dest="lam", type=float, help="Supervision weight.")
        sub.add_argument("--sup-variant", choices=[v.value for v in SupVariant])
        sub.add_argument("--seed", type=int)
        sub.add_argument("--wall-clock", action="store_true", help="Record elapsed milliseconds in wall_ms.")
        sub.add_argument("--no-progress", action="store_true", help="Hide the progress bar.")
        return sub

    gen = with_config(commands.add_parser("gen-data", help="Generate a synthetic dataset."))
    gen.set_defaults(func=cmd_gen_data)

    train = with_training(with_config(commands.add_parser("train", help="Train a reward model.")))
    train.set_defaults(func=cmd_train)

    evaluate = with_config(commands.add_parser("eval", help="Pairwise accuracy of a checkpoint."))
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--data", help="Directory with train.jsonl and optional eval.jsonl.")
    evaluate.set_defaults(func=cmd_eval)

    bound = with_config(commands.add_parser("bound", help="Generalization bound of a checkpoint."))
    bound.add_argument("--checkpoint")
    bound.add_argument("--data", help="Directory with train.jsonl and optional eval.jsonl.")
    bound.add_argument("--delta", type=float)
    bound.add_argument("--trials", type=int, help="Run validity trials instead of a single bound.")
    bound.add_argument("--mc-samples", type=int)
    bound.add_argument("--workers", type=int)
    bound.add_argument("--risk-override", type=float, help=argparse.SUPPRESS)
    bound.set_defaults(func=cmd_bound)

    check = commands.add_parser("gradcheck", help="Finite-difference gradient checks.")
    check.add_argument("--seed", type=int, default=0)
    check.add_argument("--inject-fault", metavar="PRIMITIVE", help=argparse.SUPPRESS)
    check.set_defaults(func=cmd_gradcheck)

    plot = commands.add_parser("plot", help="Plot metric curves of one or more runs.")
    plot.add_argument("runs", nargs="+", help="Run directories containing metrics.csv.")
    plot.add_argument("--metric", nargs="+", default=["train_acc", "eval_acc"])
    plot.add_argument("--kind", choices=["curve", "summary"], default="curve")
    plot.add_argument("--smooth", type=int)
    plot.add_argument("--title")
    plot.add_argument("--out", default="curves.html")
    plot.add_argument("--show", action="store_true")
    plot.set_defaults(func=cmd_plot)

    sweep = with_training(with_config(commands.add_parser("sweep", help="Train one run per setting.")))
    group = sweep.add_mutually_exclusive_group(required=True)
    group.add_argument("--lambdas", nargs="+", type=float)
    group.add_argument("--variants", nargs="+", choices=[v.value for v in SupVariant])
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.func(args)
    except (ConfigError, DomainError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, SchemaError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
