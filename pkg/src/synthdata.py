"""
Synthetic preference pairs with known ground truth.

A ``CausalPreferenceWorld`` fixes three random maps from its seed: the
prompt-to-weights map A, the quality map B and the quality mixer U. For a
prompt x the true weights are w* = softmax(A x); a response y has latent
qualities q = U tanh(B [x; y]) and true reward r* = w* . q. Pairs are
labeled by a Bradley-Terry draw at temperature tau.
"""

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Self

import numpy as np

from src import numerics
from src.config import GeneratorConfig
from src.errors import SchemaError
from src.record import PreferenceExample, Truth
from src.record_reader import load_jsonl, save_jsonl

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
WEIGHT_MAP_SCALE = 2.0
QUALITY_MAP_SCALE = 1.5


class CausalPreferenceWorld:
    """
    The fixed maps of the generator.

    Two worlds built from the same seed and dimensions are identical, so a
    validity trial can draw fresh samples from the same population.
    """

    def __init__(self, config: GeneratorConfig):
        self.config = config
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
        width = config.d_x + config.d_y
        self.A = rng.standard_normal((config.k, config.d_x)) * WEIGHT_MAP_SCALE / np.sqrt(config.d_x)
        self.B = rng.standard_normal((config.j_true, width)) * QUALITY_MAP_SCALE / np.sqrt(width)
        self.U = rng.standard_normal((config.k, config.j_true)) / np.sqrt(config.j_true)

    def true_weights(self, x_feat: np.ndarray) -> np.ndarray:
        return numerics.softmax(np.asarray(x_feat) @ self.A.T, axis=-1)

    def qualities(self, x_feat: np.ndarray, y_feat: np.ndarray) -> np.ndarray:
        inputs = np.concatenate([x_feat, y_feat[..., : self.config.d_y]], axis=-1)
        return np.tanh(inputs @ self.B.T) @ self.U.T

    def posterior_scores(self, x_feat: np.ndarray, y_feat: np.ndarray) -> np.ndarray:
        """True reward r*(x, y); lets the world act as an oracle scorer."""
        return np.sum(self.true_weights(x_feat) * self.qualities(x_feat, y_feat), axis=-1)

    def sample(self, n: int, rng: np.random.Generator) -> list[PreferenceExample]:
        """
        Draw ``n`` labeled pairs.

        Each pair draws a prompt, two candidate responses and a Bernoulli
        label with P(first preferred) = sigmoid((r*_a - r*_b) / tau); the
        roles are swapped when the second candidate wins.
        """
        cfg = self.config
        x = rng.standard_normal((n, cfg.d_x))
        y_a = rng.standard_normal((n, cfg.d_y))
        y_b = rng.standard_normal((n, cfg.d_y))
        w_star = self.true_weights(x)
        q_a, q_b = self.qualities(x, y_a), self.qualities(x, y_b)
        gap_ab = np.sum(w_star * (q_a - q_b), axis=-1)
        a_wins = rng.random(n) < numerics.stable_sigmoid(gap_ab / cfg.temperature)
        s_a = q_a + rng.normal(0.0, cfg.score_noise, q_a.shape)
        s_b = q_b + rng.normal(0.0, cfg.score_noise, q_b.shape)

        examples = []
        for i in range(n):
            pos, neg = ((y_a, q_a, s_a), (y_b, q_b, s_b)) if a_wins[i] else ((y_b, q_b, s_b), (y_a, q_a, s_a))
            q_pos, q_neg = pos[1][i], neg[1][i]
            examples.append(
                PreferenceExample(
                    x_feat=x[i],
                    y_pos_feat=pos[0][i],
                    y_neg_feat=neg[0][i],
                    scores_pos=pos[2][i],
                    scores_neg=neg[2][i],
                    truth=Truth(w_star[i], q_pos, q_neg, float(np.sum(w_star[i] * (q_pos - q_neg)))),
                )
            )
        return examples


@dataclass
class SplitDataset:
    """
    Train and eval splits plus the manifest that describes them.

    Attributes:
        train (list[PreferenceExample]): Examples used for optimization.
        eval (list[PreferenceExample]): Held-out examples.
        manifest (dict): Config echo, split indices, feature schema and
            format version.
    """

    train: list[PreferenceExample]
    eval: list[PreferenceExample]
    manifest: dict = field(default_factory=dict)

    @property
    def d_x(self) -> int:
        return self._first().x_feat.size

    @property
    def d_y(self) -> int:
        return self._first().y_pos_feat.size

    @property
    def k(self) -> int | None:
        """Score dimension, None when no example carries scores."""
        for example in self.train + self.eval:
            if example.scores_pos is not None:
                return example.scores_pos.size
        return None

    def _first(self) -> PreferenceExample:
        if self.train:
            return self.train[0]
        if self.eval:
            return self.eval[0]
        raise SchemaError("Dataset is empty")

    def save(self, out_dir: str | Path) -> Self:
        """Write ``train.jsonl``, ``eval.jsonl`` and ``manifest.json``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_jsonl(self.train, out_dir / "train.jsonl")
        save_jsonl(self.eval, out_dir / "eval.jsonl")
        (out_dir / "manifest.json").write_text(json.dumps(self.manifest, indent=2))
        logger.info("Wrote %d train and %d eval pairs to %s", len(self.train), len(self.eval), out_dir)
        return self

    @classmethod
    def load(
        cls,
        train_path: str | Path,
        eval_path: str | Path | None = None,
        d_x: int | None = None,
        d_y: int | None = None,
    ) -> Self:
        """
        Read both splits and the ``manifest.json`` next to the train file.

        Raises:
            SchemaError: If the splits disagree on feature or score dimensions.
        """
        train = load_jsonl(train_path, d_x, d_y)
        evaluation = [] if eval_path is None else load_jsonl(eval_path, d_x, d_y)
        if train and evaluation:
            train_schema, eval_schema = _schema_of(train), _schema_of(evaluation)
            scored = None not in (train_schema["k"], eval_schema["k"])
            features_differ = (train_schema["d_x"], train_schema["d_y"]) != (eval_schema["d_x"], eval_schema["d_y"])
            if features_differ or (scored and train_schema["k"] != eval_schema["k"]):
                raise SchemaError(f"{eval_path}: schema {eval_schema} differs from {train_path}: {train_schema}")
        manifest = {}
        sidecar = Path(train_path).with_name("manifest.json")
        if sidecar.exists():
            manifest = json.loads(sidecar.read_text())
        return cls(train, evaluation, manifest)


def _schema_of(examples: list[PreferenceExample]) -> dict:
    k = next((e.scores_pos.size for e in examples if e.scores_pos is not None), None)
    return {"d_x": examples[0].x_feat.size, "d_y": examples[0].y_pos_feat.size, "k": k}


def _split_indices(n: int, train_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    n_train = int(round(n * train_fraction))
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def generate(config: GeneratorConfig) -> SplitDataset:
    """
    Sample a dataset from the world of ``config`` and split it.

    The same config always yields bitwise-identical splits. When
    ``config.spurious`` is set the confound is injected afterwards.
    """
    world = CausalPreferenceWorld(config)
    sample_seq, split_seq, spurious_seq = np.random.SeedSequence([config.seed, 1]).spawn(3)
    examples = world.sample(config.n, np.random.default_rng(sample_seq))
    train_idx, eval_idx = _split_indices(config.n, config.train_fraction, np.random.default_rng(split_seq))
    if eval_idx.size == 0:
        logger.warning("Eval split is empty for n=%d, train_fraction=%g", config.n, config.train_fraction)

    dataset = SplitDataset(
        train=[examples[i] for i in train_idx],
        eval=[examples[i] for i in eval_idx],
        manifest={
            "format_version": MANIFEST_FORMAT_VERSION,
            "config": config.to_dict(),
            "train_indices": train_idx.tolist(),
            "eval_indices": eval_idx.tolist(),
            "schema": {"d_x": config.d_x, "d_y": config.d_y, "k": config.k},
        },
    )
    if config.spurious is not None:
        dataset = inject_spurious(dataset, config.spurious, np.random.default_rng(spurious_seq))
    return dataset


def _with_marker(example: PreferenceExample, marks_pos: bool) -> PreferenceExample:
    pos, neg = (1.0, 0.0) if marks_pos else (0.0, 1.0)
    return replace(
        example,
        y_pos_feat=np.append(example.y_pos_feat, pos),
        y_neg_feat=np.append(example.y_neg_feat, neg),
    )


def inject_spurious(dataset: SplitDataset, rho: float, rng: np.random.Generator) -> SplitDataset:
    """
    Append a confounding marker feature to every response.

    The marker is 1 on one response of each pair and 0 on the other. In the
    train split it sits on the preferred response with probability
    max(rho, 1/2), so any rho up to 1/2 leaves the marker uninformative. In
    the eval split it is always a fair coin. Prompts, scores and truth are
    untouched.

    Args:
        dataset: Splits to confound.
        rho: Confound strength; above 1/2 it is the probability that the
            marker agrees with the label in train.
        rng: Source of the marker draws.

    Returns:
        A new dataset whose response dimension is one larger.
    """
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"Spurious strength must lie in [0, 1], got {rho}")
    agree = max(rho, 0.5)
    train_marks = rng.random(len(dataset.train)) < agree
    eval_marks = rng.random(len(dataset.eval)) < 0.5

    manifest = json.loads(json.dumps(dataset.manifest))
    schema = manifest.setdefault("schema", {})
    schema["d_y"] = (dataset.d_y if dataset.train or dataset.eval else schema.get("d_y", 0)) + 1
    manifest["spurious"] = rho
    return SplitDataset(
        train=[_with_marker(e, bool(m)) for e, m in zip(dataset.train, train_marks)],
        eval=[_with_marker(e, bool(m)) for e, m in zip(dataset.eval, eval_marks)],
        manifest=manifest,
    )
