"""
Optimization loop and evaluation metrics for both reward models.
"""

import logging
import math
import time
from dataclasses import replace
from pathlib import Path
from typing import NamedTuple, Self

import numpy as np
import pandas as pd
from tqdm import tqdm

from src import diffcore as dc
from src.config import ModelHyper, ModelKind, TrainConfig
from src.data_transformer import MetricsTransformer
from src.diffcore import ParamStore
from src.errors import DomainError, NonFiniteLossError
from src.losses import (
    LossBreakdown,
    LossResult,
    PreferenceBatch,
    ScoreNormalizer,
    baseline_bt_loss,
    supervision_divergence,
    total_loss,
)
from src.model import RewardModel, VrmModel, build_model
from src.record import PreferenceExample
from src.synthdata import SplitDataset

logger = logging.getLogger(__name__)


class MetricRow(NamedTuple):
    """
    One row of the metric table.

    Loss fields are means over the optimizer steps since the previous row.
    ``sup_kl`` is the categorical KL from the posterior-mean weights to the
    normalized scores of the train split (NaN for the baseline).
    """

    step: int
    train_acc: float
    eval_acc: float
    bt_loglik: float
    kl_w: float
    kl_z_pos: float
    kl_z_neg: float
    sup: float
    total: float
    sup_kl: float
    wall_ms: int


METRIC_COLUMNS = list(MetricRow._fields)


class Adam:
    """
    Adaptive moment optimizer with bias correction.

    Updates replace each parameter value with a new array; the forward
    values of earlier graphs stay intact.
    """

    def __init__(self, params: ParamStore, learning_rate: float, beta1: float, beta2: float, eps: float):
        self.params = params
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(node.value) for name, node in params}
        self.v = {name: np.zeros_like(node.value) for name, node in params}

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1**self.t
        correction2 = 1.0 - self.beta2**self.t
        for name, node in self.params:
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * node.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * node.grad**2
            m_hat = self.m[name] / correction1
            v_hat = self.v[name] / correction2
            node.value = node.value - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their global l2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(node.grad**2)) for _, node in params))
    if norm > max_norm:
        scale = max_norm / norm
        for _, node in params:
            node.grad = node.grad * scale
    return norm


def pairwise_accuracy(model, examples: list[PreferenceExample]) -> float:
    """
    Fraction of pairs whose preferred response scores strictly higher.

    ``model`` is anything with ``posterior_scores(x, y)``; the variational
    model scores at the posterior means. Ties count as wrong.

    Raises:
        ValueError: If ``examples`` is empty.
    """
    if not examples:
        raise ValueError("Cannot compute accuracy on an empty split")
    batch = PreferenceBatch.from_examples(examples)
    r_pos = model.posterior_scores(batch.x, batch.y_pos)
    r_neg = model.posterior_scores(batch.x, batch.y_neg)
    return float(np.mean(r_pos > r_neg))


def _truth_weights(examples: list[PreferenceExample]) -> np.ndarray:
    if not examples:
        raise ValueError("Cannot compute weight recovery on an empty split")
    if any(e.truth is None for e in examples):
        raise DomainError("Weight recovery needs ground-truth weights on every example")
    return np.stack([e.truth.w_star for e in examples])


def weight_recovery_from(w_star: np.ndarray, w_mean: np.ndarray) -> float:
    """Mean Σ_k w*_k ln(w*_k / w_k); zero-weight terms contribute 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(w_star > 0.0, w_star * (np.log(w_star) - np.log(w_mean)), 0.0)
    return float(np.mean(np.sum(terms, axis=-1)))


def weight_recovery(model: VrmModel, examples: list[PreferenceExample]) -> float:
    """
    Mean categorical KL from the true weights to the posterior-mean weights.

    Raises:
        DomainError: If an example lacks ground truth.
    """
    w_star = _truth_weights(examples)
    w_mean = model.posterior_mean_weights(np.stack([e.x_feat for e in examples]))
    return weight_recovery_from(w_star, w_mean)


def weight_profile(model: VrmModel, examples: list[PreferenceExample]) -> np.ndarray:
    """Average posterior-mean weight of each objective over a split."""
    if not examples:
        raise ValueError("Cannot compute a weight profile on an empty split")
    return model.posterior_mean_weights(np.stack([e.x_feat for e in examples])).mean(axis=0)


class Trainer:
    """
    Mini-batch training of a reward model on a dataset.

    Example:
        trainer = Trainer.using(dataset, config, hyper).fit().export("runs/a")
    """

    def __init__(self, dataset: SplitDataset, config: TrainConfig, model: RewardModel):
        self.dataset = dataset
        self.config = config
        self.model = model
        self.rows: list[MetricRow] = []
        self.normalizer = self._fit_normalizer(dataset.train)
        self.train_batch = PreferenceBatch.from_examples(dataset.train, self.normalizer)

    @classmethod
    def using(cls, dataset: SplitDataset, config: TrainConfig, hyper: ModelHyper | None = None) -> Self:
        """
        Build a trainer with a freshly initialized model.

        The feature dimensions of ``hyper`` are taken from the dataset, and
        so is K when the data carries scores.

        Raises:
            ValueError: If the train split is empty.
        """
        if not dataset.train:
            raise ValueError("Training needs a nonempty train split")
        hyper = hyper or ModelHyper()
        changes = {"d_x": dataset.d_x, "d_y": dataset.d_y}
        if dataset.k is not None and config.model_kind is ModelKind.VRM:
            changes["k"] = dataset.k
        hyper = replace(hyper, **changes)
        return cls(dataset, config, build_model(config.model_kind, hyper, config.seed))

    @staticmethod
    def _fit_normalizer(examples: list[PreferenceExample]) -> ScoreNormalizer | None:
        scores = [e.scores_pos for e in examples if e.scores_pos is not None]
        if len(scores) < 2:
            if scores:
                logger.warning("Only one scored example; supervision disabled")
            return None
        return ScoreNormalizer.fit(np.stack(scores))

    def _loss(self, batch: PreferenceBatch, rng: np.random.Generator) -> LossResult:
        if isinstance(self.model, VrmModel):
            cfg = self.config
            return total_loss(
                self.model,
                batch,
                rng,
                lam=cfg.lam,
                variant=cfg.sup_variant,
                prior_alpha0=cfg.prior_alpha0,
                margin=cfg.rank_margin,
                concentration=cfg.dir_concentration,
            )
        return baseline_bt_loss(self.model, batch)

    def fit(self) -> Self:
        """
        Run every epoch and record a metric row each ``eval_interval`` steps
        and after the last step.

        Raises:
            NonFiniteLossError: On a NaN or infinite batch loss.
        """
        cfg = self.config
        shuffle_seq, noise_seq = np.random.SeedSequence(cfg.seed).spawn(2)
        shuffle_rng = np.random.default_rng(shuffle_seq)
        noise_rng = np.random.default_rng(noise_seq)
        optimizer = Adam(self.model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

        n = self.train_batch.size
        total_steps = cfg.epochs * math.ceil(n / cfg.batch_size)
        logger.info(
            "Training %s on %d pairs for %d steps (lam=%g, variant=%s)",
            self.model.kind, n, total_steps, cfg.lam, cfg.sup_variant,
        )
        started = time.perf_counter()
        window: list[LossBreakdown] = []
        step = 0
        with tqdm(total=total_steps, desc=str(self.model.kind), disable=not cfg.progress) as progress:
            for _ in range(cfg.epochs):
                order = shuffle_rng.permutation(n)
                for start in range(0, n, cfg.batch_size):
                    batch = self.train_batch.take(order[start : start + cfg.batch_size])
                    result = self._loss(batch, noise_rng)
                    if not result.breakdown.is_finite():
                        raise NonFiniteLossError(step, result.breakdown)
                    self.model.params.zero_grad()
                    dc.backward(result.total)
                    clip_grad_norm(self.model.params, cfg.clip_norm)
                    optimizer.step()

                    step += 1
                    window.append(result.breakdown)
                    progress.update(1)
                    if step % cfg.eval_interval == 0 or step == total_steps:
                        row = self._metric_row(step, window, started)
                        self.rows.append(row)
                        progress.set_postfix(train_acc=f"{row.train_acc:.3f}", total=f"{row.total:.3f}")
                        logger.debug("Metrics %s", row._asdict())
                        window = []
        return self

    def _metric_row(self, step: int, window: list[LossBreakdown], started: float) -> MetricRow:
        means = np.mean(np.array(window), axis=0)
        breakdown = LossBreakdown(*(float(v) for v in means))
        eval_acc = pairwise_accuracy(self.model, self.dataset.eval) if self.dataset.eval else float("nan")
        sup_kl = (
            supervision_divergence(self.model, self.train_batch)
            if isinstance(self.model, VrmModel)
            else float("nan")
        )
        wall_ms = int(round((time.perf_counter() - started) * 1000)) if self.config.record_wall_clock else 0
        return MetricRow(
            step=step,
            train_acc=pairwise_accuracy(self.model, self.dataset.train),
            eval_acc=eval_acc,
            **breakdown._asdict(),
            sup_kl=sup_kl,
            wall_ms=wall_ms,
        )

    @property
    def metrics(self) -> pd.DataFrame:
        return MetricsTransformer.using(self.rows, METRIC_COLUMNS).to_dataframe()

    def export(self, out_dir: str | Path) -> Self:
        """Write ``checkpoint.json``, ``metrics.csv`` and ``metrics.jsonl``."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.model.save(out_dir / "checkpoint.json")
        MetricsTransformer.using(self.rows, METRIC_COLUMNS).export(out_dir / "metrics.csv", out_dir / "metrics.jsonl")
        logger.info("Wrote checkpoint and %d metric rows to %s", len(self.rows), out_dir)
        return self


def train(
    dataset: SplitDataset, config: TrainConfig, hyper: ModelHyper | None = None
) -> tuple[RewardModel, pd.DataFrame]:
    """Train ``config.model_kind`` on ``dataset``; returns the model and its metric table."""
    trainer = Trainer.using(dataset, config, hyper).fit()
    return trainer.model, trainer.metrics
