"""
Generalization bound of the variational reward model.

    R <= R_hat + sqrt((KL(Q||P) + ln(1/delta) + 2.5 ln N + 8) / (2N - 1))

KL(Q||P) is the total over the training set of the Dirichlet weight KL and
both Gaussian feature KLs. When ln(1/delta) > 2N or KL > 2N the statement
holds trivially and the bound is reported as 1.
"""

import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from src.config import GeneratorConfig, ModelHyper, TrainConfig
from src.distributions import DirichletParams, dirichlet_kl, draw_gamma, gaussian_kl
from src.errors import DomainError
from src.losses import PreferenceBatch
from src.model import VrmModel, build_model
from src.record import PreferenceExample
from src.synthdata import CausalPreferenceWorld, SplitDataset
from src.training import Trainer

logger = logging.getLogger(__name__)

MIN_VALIDITY_TRIALS = 20


@dataclass(frozen=True)
class BoundReport:
    """
    One evaluated bound.

    Attributes:
        n (int): Number of training examples.
        delta (float): Confidence parameter.
        empirical_risk (float): Monte Carlo 0-1 risk on the training set.
        kl_total (float): Total KL of the posterior to the prior.
        complexity (float): The square-root term.
        bound (float): empirical_risk + complexity, or 1 when trivial.
        trivial (bool): ln(1/delta) > 2N or kl_total > 2N.
        vacuous (bool): Non-trivial bound above 1 (valid but uninformative).
        mc_samples (int): Latent draws per example behind the risk.
    """

    n: int
    delta: float
    empirical_risk: float
    kl_total: float
    complexity: float
    bound: float
    trivial: bool
    vacuous: bool
    mc_samples: int

    def to_json(self, config: dict | None = None) -> str:
        data = asdict(self)
        data["config"] = config or {}
        data["timestamp"] = datetime.now(timezone.utc).isoformat()
        return json.dumps(data, indent=2)

    def save(self, path: str | Path, config: dict | None = None) -> None:
        Path(path).write_text(self.to_json(config))


def compute_bound(empirical_risk: float, kl_total: float, n: int, delta: float, mc_samples: int = 0) -> BoundReport:
    """
    Evaluate the bound for given risk, KL, sample size and confidence.

    Raises:
        DomainError: If n < 1, delta is outside (0, 1), the risk is outside
            [0, 1] or kl_total is negative.
    """
    if n < 1:
        raise DomainError(f"N must be >= 1, got {n}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    if not 0.0 <= empirical_risk <= 1.0:
        raise DomainError(f"empirical risk must lie in [0, 1], got {empirical_risk}")
    if kl_total < 0.0:
        raise DomainError(f"kl_total must be >= 0, got {kl_total}")

    log_inv_delta = math.log(1.0 / delta)
    complexity = math.sqrt((kl_total + log_inv_delta + 2.5 * math.log(n) + 8.0) / (2 * n - 1))
    trivial = log_inv_delta > 2 * n or kl_total > 2 * n
    bound = 1.0 if trivial else empirical_risk + complexity
    return BoundReport(
        n=n,
        delta=delta,
        empirical_risk=empirical_risk,
        kl_total=kl_total,
        complexity=complexity,
        bound=bound,
        trivial=trivial,
        vacuous=not trivial and bound > 1.0,
        mc_samples=mc_samples,
    )


def empirical_risk(
    model, examples: list[PreferenceExample], mc_samples: int = 16, rng: np.random.Generator | None = None
) -> float:
    """
    Fraction of pairs where the preferred response does not win (ties lose).

    The variational model draws ``mc_samples`` latents per example, one w
    shared by both responses of a draw. Any other scorer (the baseline or a
    ground-truth oracle) is deterministic and scored once.

    Raises:
        DomainError: If ``mc_samples`` < 1.
    """
    if mc_samples < 1:
        raise DomainError(f"mc_samples must be >= 1, got {mc_samples}")
    if not examples:
        raise ValueError("Cannot compute risk on an empty split")
    batch = PreferenceBatch.from_examples(examples)
    if not isinstance(model, VrmModel):
        return float(np.mean(model.posterior_scores(batch.x, batch.y_pos) <= model.posterior_scores(batch.x, batch.y_neg)))

    rng = rng or np.random.default_rng()
    alpha = model.encode_weights(batch.x).alpha.value
    q_pos = model.encode_features(batch.x, batch.y_pos)
    q_neg = model.encode_features(batch.x, batch.y_neg)
    mu_pos, sigma_pos = q_pos.mu.value, q_pos.sigma.value
    mu_neg, sigma_neg = q_neg.mu.value, q_neg.sigma.value

    losses = np.zeros(batch.size)
    for _ in range(mc_samples):
        g = draw_gamma(alpha, rng).g
        w = g / g.sum(axis=-1, keepdims=True)
        z_pos = mu_pos + sigma_pos * rng.standard_normal(mu_pos.shape)
        z_neg = mu_neg + sigma_neg * rng.standard_normal(mu_neg.shape)
        r_pos = model.decode_reward(w, z_pos).value
        r_neg = model.decode_reward(w, z_neg).value
        losses += r_pos <= r_neg
    return float(np.mean(losses / mc_samples))


def kl_per_example(model: VrmModel, examples: list[PreferenceExample], prior_alpha0: float = 1.0) -> np.ndarray:
    """KL_w + KL_z+ + KL_z- of every example, against Dir(alpha0) and N(0, I)."""
    batch = PreferenceBatch.from_examples(examples)
    q_w = model.encode_weights(batch.x)
    prior = DirichletParams.uniform(q_w.k, prior_alpha0)
    kl_w = dirichlet_kl(q_w, prior).value
    kl_pos = gaussian_kl(model.encode_features(batch.x, batch.y_pos)).value
    kl_neg = gaussian_kl(model.encode_features(batch.x, batch.y_neg)).value
    return kl_w + kl_pos + kl_neg


def kl_total(model: VrmModel, examples: list[PreferenceExample], prior_alpha0: float = 1.0) -> float:
    """Sum over examples of the three closed-form KL terms; 0 for no examples."""
    if not examples:
        return 0.0
    return float(np.sum(kl_per_example(model, examples, prior_alpha0)))


def evaluate_bound(
    model: VrmModel,
    examples: list[PreferenceExample],
    delta: float = 0.05,
    mc_samples: int = 16,
    rng: np.random.Generator | None = None,
    prior_alpha0: float = 1.0,
    risk_override: float | None = None,
) -> BoundReport:
    """Bound of ``model`` on its training examples; ``risk_override`` replaces the risk estimate."""
    risk = risk_override if risk_override is not None else empirical_risk(model, examples, mc_samples, rng)
    return compute_bound(risk, kl_total(model, examples, prior_alpha0), len(examples), delta, mc_samples)


class TrialOutcome(NamedTuple):
    trial: int
    train_risk: float
    population_risk: float
    kl_total: float
    bound: float
    trivial: bool
    passed: bool


class ValiditySummary(NamedTuple):
    """
    Result of repeated bound checks.

    Attributes:
        pass_rate (float): Fraction of trials with population risk <= bound.
        outcomes (list[TrialOutcome]): Per-trial details in trial order.
    """

    pass_rate: float
    outcomes: list[TrialOutcome]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.outcomes, columns=TrialOutcome._fields)


def validity_trial(
    generator: GeneratorConfig,
    hyper: ModelHyper,
    train_config: TrainConfig | None,
    trials: int,
    delta: float = 0.05,
    mc_samples: int = 16,
    pool_factor: int = 20,
    workers: int = 1,
    seed: int = 0,
) -> ValiditySummary:
    """
    Check the bound against held-out risk over repeated training samples.

    Each trial draws a fresh train sample of ``generator.n`` pairs and a
    pool of ``pool_factor * n`` pairs from the same world, trains a model
    with ``train_config`` (``None`` keeps the initialization), and passes
    when the risk on the pool does not exceed the bound computed on the
    train sample.

    Raises:
        DomainError: If fewer than 20 trials or a pool factor below 20 is
            requested.
    """
    if trials < MIN_VALIDITY_TRIALS:
        raise DomainError(f"Validity needs at least {MIN_VALIDITY_TRIALS} trials, got {trials}")
    if pool_factor < 20:
        raise DomainError(f"The held-out pool must be at least 20x the sample, got {pool_factor}x")
    world = CausalPreferenceWorld(generator)
    hyper = replace(hyper, d_x=generator.d_x, d_y=generator.d_y, k=generator.k)

    def run(trial: int) -> TrialOutcome:
        rng = np.random.default_rng([seed, trial])
        sample = world.sample(generator.n, rng)
        pool = world.sample(pool_factor * generator.n, rng)
        if train_config is None:
            model = build_model("vrm", hyper, seed + trial)
            prior_alpha0 = 1.0
        else:
            cfg = replace(train_config, seed=train_config.seed + trial, progress=False, model_kind="vrm")
            model = Trainer.using(SplitDataset(sample, []), cfg, hyper).fit().model
            prior_alpha0 = cfg.prior_alpha0
        report = evaluate_bound(model, sample, delta, mc_samples, rng, prior_alpha0)
        population = empirical_risk(model, pool, mc_samples, rng)
        logger.debug("Trial %d: bound %.4f, population risk %.4f", trial, report.bound, population)
        return TrialOutcome(
            trial, report.empirical_risk, population, report.kl_total, report.bound, report.trivial,
            population <= report.bound,
        )

    with ThreadPoolExecutor(max_workers=workers) as executor:
        outcomes = list(executor.map(run, range(trials)))
    pass_rate = float(np.mean([o.passed for o in outcomes]))
    logger.info("Bound held in %d of %d trials", sum(o.passed for o in outcomes), trials)
    return ValiditySummary(pass_rate, outcomes)
