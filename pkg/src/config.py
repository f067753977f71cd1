"""
Run configuration.

One JSON document with the sections ``data``, ``model``, ``train``,
``bound`` and ``output``. Every section is a frozen dataclass whose
``from_dict`` rejects unknown keys, so a typo never silently falls back to
a default.
"""

import json
from dataclasses import asdict, dataclass, field, fields, replace
from enum import StrEnum
from pathlib import Path
from typing import Any, Self

from src.errors import ConfigError


class ModelKind(StrEnum):
    VRM = "vrm"
    BASELINE = "baseline"


class SupVariant(StrEnum):
    """Supervision loss on the objective weights."""

    KL = "kl"
    MAE = "mae"
    RANK = "rank"
    DIR = "dir"


def _check_keys(cls, section: str, data: Any) -> dict:
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"Section '{section}' must be an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) {unknown} in section '{section}'")
    return dict(data)


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ConfigError(message)


@dataclass(frozen=True)
class ModelHyper:
    """
    Shape of the encoders and reward decoder.

    Attributes:
        k (int): Number of objectives (Dirichlet dimension).
        j (int): Semantic feature dimension.
        hidden (int): Backbone width.
        head_hidden (int): Hidden width of each per-objective reward head.
        layers (int): Number of affine+tanh backbone layers.
        d_x (int): Prompt feature dimension.
        d_y (int): Response feature dimension.
    """

    k: int = 4
    j: int = 8
    hidden: int = 64
    head_hidden: int = 16
    layers: int = 1
    d_x: int = 8
    d_y: int = 8

    def __post_init__(self):
        _require(self.k >= 2, "model.k must be >= 2")
        for name in ("j", "hidden", "head_hidden", "layers", "d_x", "d_y"):
            _require(getattr(self, name) >= 1, f"model.{name} must be >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        return cls(**_check_keys(cls, "model", data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GeneratorConfig:
    """
    Synthetic preference world and sample size.

    Attributes:
        seed (int): Seed of the world maps and of the sample.
        n (int): Number of preference pairs.
        d_x (int): Prompt feature dimension.
        d_y (int): Response feature dimension.
        k (int): Number of objectives.
        j_true (int): Width of the hidden quality map.
        temperature (float): Bradley-Terry temperature of the labels.
        spurious (float | None): Strength of the injected spurious feature,
            None for no injection.
        train_fraction (float): Share of pairs in the train split.
        score_noise (float): Std of the observation noise on raw scores.
    """

    seed: int = 0
    n: int = 1000
    d_x: int = 8
    d_y: int = 8
    k: int = 4
    j_true: int = 4
    temperature: float = 0.1
    spurious: float | None = None
    train_fraction: float = 0.9
    score_noise: float = 0.1

    def __post_init__(self):
        _require(self.n >= 1, "generator.n must be >= 1")
        for name in ("d_x", "d_y", "j_true"):
            _require(getattr(self, name) >= 1, f"generator.{name} must be >= 1")
        _require(self.k >= 2, "generator.k must be >= 2")
        _require(self.temperature > 0.0, "generator.temperature must be > 0")
        _require(
            self.spurious is None or 0.0 <= self.spurious <= 1.0,
            "generator.spurious must lie in [0, 1]",
        )
        _require(0.0 < self.train_fraction < 1.0, "generator.train_fraction must lie in (0, 1)")
        _require(self.score_noise >= 0.0, "generator.score_noise must be >= 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        return cls(**_check_keys(cls, "generator", data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TrainConfig:
    """
    Optimization settings shared by the variational model and the baseline.

    Attributes:
        seed (int): Seed of initialization, shuffling and latent noise.
        epochs (int): Passes over the train split.
        batch_size (int): Pairs per optimizer step.
        learning_rate (float): Step size of the adaptive optimizer.
        lam (float): Weight of the supervision loss.
        sup_variant (SupVariant): Supervision loss type.
        prior_alpha0 (float): Symmetric Dirichlet prior concentration.
        eval_interval (int): Optimizer steps between metric rows.
        beta1 (float): First-moment decay.
        beta2 (float): Second-moment decay.
        eps (float): Optimizer epsilon.
        clip_norm (float): Global gradient-norm clip.
        model_kind (ModelKind): Which model to train.
        rank_margin (float): Hinge margin of the RANK variant.
        dir_concentration (float): Concentration c of the DIR variant target.
        progress (bool): Show a progress bar.
        record_wall_clock (bool): Write elapsed milliseconds; off by default so
            metric files of reruns are byte-identical (0 otherwise).
    """

    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-3
    lam: float = 0.1
    sup_variant: SupVariant = SupVariant.KL
    prior_alpha0: float = 1.0
    eval_interval: int = 50
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0
    model_kind: ModelKind = ModelKind.VRM
    rank_margin: float = 0.05
    dir_concentration: float = 10.0
    progress: bool = True
    record_wall_clock: bool = False

    def __post_init__(self):
        try:
            object.__setattr__(self, "sup_variant", SupVariant(self.sup_variant))
            object.__setattr__(self, "model_kind", ModelKind(self.model_kind))
        except ValueError as e:
            raise ConfigError(str(e)) from None
        for name in ("epochs", "batch_size", "eval_interval"):
            _require(getattr(self, name) >= 1, f"train.{name} must be >= 1")
        _require(self.learning_rate >= 0.0, "train.learning_rate must be >= 0")
        _require(self.lam >= 0.0, "train.lam must be >= 0")
        _require(self.prior_alpha0 > 0.0, "train.prior_alpha0 must be > 0")
        _require(0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0, "train.beta1/beta2 must lie in [0, 1)")
        _require(self.eps > 0.0 and self.clip_norm > 0.0, "train.eps and train.clip_norm must be > 0")
        _require(self.rank_margin >= 0.0, "train.rank_margin must be >= 0")
        _require(self.dir_concentration > 0.0, "train.dir_concentration must be > 0")

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        return cls(**_check_keys(cls, "train", data))

    def to_dict(self) -> dict:
        data = asdict(self)
        data["sup_variant"] = str(self.sup_variant)
        data["model_kind"] = str(self.model_kind)
        return data


@dataclass(frozen=True)
class BoundConfig:
    """
    Generalization-bound evaluation.

    Attributes:
        delta (float): Confidence parameter in (0, 1).
        mc_samples (int): Latent draws per example for the 0-1 risk.
        trials (int): Validity trials; 0 evaluates a single bound.
        pool_factor (int): Held-out pool size as a multiple of N.
        workers (int): Threads running trials.
        seed (int): Seed of the risk estimator and trial streams.
    """

    delta: float = 0.05
    mc_samples: int = 16
    trials: int = 0
    pool_factor: int = 20
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        _require(0.0 < self.delta < 1.0, "bound.delta must lie in (0, 1)")
        _require(self.mc_samples >= 1, "bound.mc_samples must be >= 1")
        _require(self.trials >= 0, "bound.trials must be >= 0")
        _require(self.pool_factor >= 1, "bound.pool_factor must be >= 1")
        _require(self.workers >= 1, "bound.workers must be >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        return cls(**_check_keys(cls, "bound", data))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class DataConfig:
    """
    Where the preference pairs come from: a generator or JSONL files.

    Attributes:
        generator (GeneratorConfig | None): Synthetic world settings.
        train_path (str | None): JSONL train split.
        eval_path (str | None): JSONL eval split (optional).
    """

    generator: GeneratorConfig | None = None
    train_path: str | None = None
    eval_path: str | None = None

    def __post_init__(self):
        if isinstance(self.generator, dict):
            object.__setattr__(self, "generator", GeneratorConfig.from_dict(self.generator))
        _require(
            not (self.generator is not None and self.train_path is not None),
            "data.generator and data.train_path are mutually exclusive",
        )
        _require(self.eval_path is None or self.train_path is not None, "data.eval_path needs data.train_path")
        if self.generator is None and self.train_path is None:
            object.__setattr__(self, "generator", GeneratorConfig())

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        return cls(**_check_keys(cls, "data", data))

    def to_dict(self) -> dict:
        return {
            "generator": None if self.generator is None else self.generator.to_dict(),
            "train_path": self.train_path,
            "eval_path": self.eval_path,
        }


@dataclass(frozen=True)
class RunConfig:
    """The whole run: data, model, training, bound and output directory."""

    data: DataConfig = field(default_factory=DataConfig)
    model: ModelHyper = field(default_factory=ModelHyper)
    train: TrainConfig = field(default_factory=TrainConfig)
    bound: BoundConfig = field(default_factory=BoundConfig)
    output: str = "runs/default"

    @classmethod
    def from_dict(cls, data: dict | None) -> Self:
        data = _check_keys(cls, "run", data)
        return cls(
            data=DataConfig.from_dict(data.get("data")),
            model=ModelHyper.from_dict(data.get("model")),
            train=TrainConfig.from_dict(data.get("train")),
            bound=BoundConfig.from_dict(data.get("bound")),
            output=str(data.get("output", "runs/default")),
        )

    @classmethod
    def load(cls, path: str | Path) -> Self:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"Invalid JSON in {path}: {e}") from None
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "data": self.data.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "bound": self.bound.to_dict(),
            "output": self.output,
        }

    def with_overrides(self, **sections: dict) -> Self:
        """Return a copy with the given fields replaced section by section."""
        updated = {}
        for name, changes in sections.items():
            changes = {k: v for k, v in changes.items() if v is not None}
            if changes:
                updated[name] = replace(getattr(self, name), **changes)
        return replace(self, **updated)
