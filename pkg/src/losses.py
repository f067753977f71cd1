"""
Preference ELBO, weight supervision and the total training loss.

    total = -(bt_loglik - kl_w - kl_z_pos - kl_z_neg) + lam * sup

Every term is a batch mean. The variational part uses one latent sample per
example with a single w shared by both responses.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Self

import numpy as np

from src import diffcore as dc
from src import numerics
from src.config import SupVariant
from src.diffcore import Node, as_node
from src.distributions import DirichletParams, LatentNoise, LatentSample, dirichlet_kl, gaussian_kl, sample_latents
from src.errors import DomainError, ShapeError
from src.model import BaselineRm, VrmModel
from src.record import PreferenceExample

logger = logging.getLogger(__name__)

DEFAULT_RANK_MARGIN = 0.05
DEFAULT_DIR_CONCENTRATION = 10.0


class LossBreakdown(NamedTuple):
    """
    Batch-mean loss terms as plain floats.

    Attributes:
        bt_loglik (float): Mean log preference probability of the sample.
        kl_w (float): Mean Dirichlet KL to the prior.
        kl_z_pos (float): Mean Gaussian KL of the preferred response.
        kl_z_neg (float): Mean Gaussian KL of the dispreferred response.
        sup (float): Mean supervision loss (0 for unscored examples).
        total (float): -(bt_loglik - kl_w - kl_z_pos - kl_z_neg) + lam * sup.
    """

    bt_loglik: float
    kl_w: float
    kl_z_pos: float
    kl_z_neg: float
    sup: float
    total: float

    @property
    def elbo(self) -> float:
        return self.bt_loglik - self.kl_w - self.kl_z_pos - self.kl_z_neg

    def recomposed(self, lam: float) -> float:
        return -self.elbo + lam * self.sup

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self)))


class ElboTerms(NamedTuple):
    """Per-example ELBO pieces of one latent sample, as graph nodes."""

    bt_loglik: Node
    kl_w: Node
    kl_z_pos: Node
    kl_z_neg: Node
    q_w: DirichletParams
    sample: LatentSample

    def elbo(self) -> Node:
        return self.bt_loglik - self.kl_w - self.kl_z_pos - self.kl_z_neg


class LossResult(NamedTuple):
    total: Node
    breakdown: LossBreakdown
    terms: ElboTerms | None


@dataclass(frozen=True)
class PreferenceBatch:
    """
    Row-stacked examples.

    Attributes:
        x (np.ndarray): Prompt features, one row per pair.
        y_pos (np.ndarray): Preferred response features.
        y_neg (np.ndarray): Dispreferred response features.
        s_tilde (np.ndarray | None): Normalized target weights (uniform rows
            where an example has no scores), None when no example has scores.
        has_scores (np.ndarray): Mask of examples carrying scores.
    """

    x: np.ndarray
    y_pos: np.ndarray
    y_neg: np.ndarray
    s_tilde: np.ndarray | None
    has_scores: np.ndarray

    @property
    def size(self) -> int:
        return self.x.shape[0]

    @classmethod
    def from_examples(
        cls, examples: list[PreferenceExample], normalizer: "ScoreNormalizer | None" = None
    ) -> Self:
        """
        Stack examples; scores are normalized with ``normalizer`` when given.

        Raises:
            ValueError: If ``examples`` is empty.
        """
        if not examples:
            raise ValueError("Cannot build a batch from an empty list of examples")
        has_scores = np.array([e.scores_pos is not None for e in examples])
        s_tilde = None
        if normalizer is not None and has_scores.any():
            k = normalizer.mean.size
            s_tilde = np.full((len(examples), k), 1.0 / k)
            raw = np.stack([e.scores_pos for e in examples if e.scores_pos is not None])
            s_tilde[has_scores] = normalizer.transform(raw)
        else:
            has_scores = np.zeros(len(examples), dtype=bool)
        return cls(
            x=np.stack([e.x_feat for e in examples]),
            y_pos=np.stack([e.y_pos_feat for e in examples]),
            y_neg=np.stack([e.y_neg_feat for e in examples]),
            s_tilde=s_tilde,
            has_scores=has_scores,
        )

    def take(self, index: np.ndarray) -> Self:
        return PreferenceBatch(
            x=self.x[index],
            y_pos=self.y_pos[index],
            y_neg=self.y_neg[index],
            s_tilde=None if self.s_tilde is None else self.s_tilde[index],
            has_scores=self.has_scores[index],
        )


class ScoreNormalizer(NamedTuple):
    """
    Per-dimension mean and population std of raw preferred-response scores.

    Dimensions with zero variance map to z-score 0.
    """

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, scores: np.ndarray) -> Self:
        """
        Raises:
            DomainError: If fewer than two rows are given.
        """
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] < 2:
            raise DomainError(f"Score normalization needs an N x K matrix with N >= 2, got {scores.shape}")
        std = scores.std(axis=0)
        flat = std == 0.0
        if flat.any():
            logger.warning("Score column(s) %s have zero variance; their z-scores are set to 0", np.flatnonzero(flat).tolist())
        return cls(scores.mean(axis=0), std)

    def transform(self, scores: np.ndarray) -> np.ndarray:
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape[-1] != self.mean.size:
            raise ShapeError(f"Shape mismatch: scores have {scores.shape[-1]} columns, normalizer {self.mean.size}")
        flat = self.std == 0.0
        z = (scores - self.mean) / np.where(flat, 1.0, self.std)
        z = np.where(flat, 0.0, z)
        return numerics.softmax(z, axis=-1)


def normalize_scores(scores: np.ndarray) -> np.ndarray:
    """Z-score each column across the dataset, then softmax each row."""
    return ScoreNormalizer.fit(scores).transform(scores)


def bt_preference_prob(r_pos, r_neg):
    """P(y+ preferred over y-) = sigmoid(r+ - r-)."""
    return numerics.stable_sigmoid(np.subtract(r_pos, r_neg))


def elbo_preference(
    model: VrmModel,
    batch: PreferenceBatch,
    rng: np.random.Generator | None = None,
    prior_alpha0: float | np.ndarray = 1.0,
    noise: LatentNoise | None = None,
) -> ElboTerms:
    """
    One-sample preference ELBO terms for every pair of the batch.

    Args:
        model: The variational model.
        batch: Stacked pairs.
        rng: Source of the latent draw, ignored when ``noise`` is given.
        prior_alpha0: Concentration of the Dirichlet prior (scalar or K-vector).
        noise: Recorded noise to replay the draw.
    """
    q_w = model.encode_weights(batch.x)
    q_pos = model.encode_features(batch.x, batch.y_pos)
    q_neg = model.encode_features(batch.x, batch.y_neg)
    sample = sample_latents(q_w, q_pos, q_neg, rng, noise)

    r_pos = model.decode_reward(sample.w, sample.z_pos)
    r_neg = model.decode_reward(sample.w, sample.z_neg)
    prior = DirichletParams(np.broadcast_to(np.asarray(prior_alpha0, dtype=np.float64), (q_w.k,)).copy())
    return ElboTerms(
        bt_loglik=dc.log_sigmoid(r_pos - r_neg),
        kl_w=dirichlet_kl(q_w, prior),
        kl_z_pos=gaussian_kl(q_pos),
        kl_z_neg=gaussian_kl(q_neg),
        q_w=q_w,
        sample=sample,
    )


def _rank_pairs(k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pairs = [(a, b) for a in range(k) for b in range(k) if a != b]
    first = np.array([a for a, _ in pairs])
    second = np.array([b for _, b in pairs])
    difference = np.zeros((k, len(pairs)))
    difference[first, np.arange(len(pairs))] = 1.0
    difference[second, np.arange(len(pairs))] = -1.0
    return difference, first, second


def supervision_loss(
    q: DirichletParams,
    s_tilde: np.ndarray,
    variant: SupVariant | str = SupVariant.KL,
    margin: float = DEFAULT_RANK_MARGIN,
    concentration: float = DEFAULT_DIR_CONCENTRATION,
) -> Node:
    """
    Supervision of the objective weights by normalized scores.

    With w = alpha / Σalpha the Dirichlet mean:

    - KL: Σ_k w_k ln(w_k / s_k), the categorical KL from the mean to s.
    - MAE: mean_k |w_k - s_k|.
    - RANK: mean over ordered pairs (a, b) with s_a > s_b of
      max(0, margin - (w_a - w_b)); 0 when s has no strict pair.
    - DIR: KL(Dir(alpha) || Dir(concentration * s)).

    Returns:
        A scalar node for a single K-vector, one value per row otherwise.

    Raises:
        ShapeError: If ``s_tilde`` and ``q`` disagree on K.
        DomainError: If the KL variant sees a non-positive target.
    """
    variant = SupVariant(variant)
    s_tilde = np.asarray(s_tilde, dtype=np.float64)
    if s_tilde.shape[-1] != q.k:
        raise ShapeError(f"Shape mismatch: s_tilde has {s_tilde.shape[-1]} entries, q has K={q.k}")
    if variant is SupVariant.DIR:
        return dirichlet_kl(q, DirichletParams(concentration * s_tilde))
    w_mean = q.mean()
    match variant:
        case SupVariant.KL:
            if np.any(s_tilde <= 0.0):
                raise DomainError("KL supervision needs a strictly positive target")
            return dc.sum(w_mean * (dc.log(w_mean) - np.log(s_tilde)), axis=-1)
        case SupVariant.MAE:
            return dc.mean(dc.absolute(w_mean - s_tilde), axis=-1)
        case SupVariant.RANK:
            difference, first, second = _rank_pairs(q.k)
            ordered = (s_tilde[..., first] > s_tilde[..., second]).astype(np.float64)
            count = np.maximum(np.sum(ordered, axis=-1), 1.0)
            hinge = dc.relu(margin - dc.matmul(w_mean, difference)) * ordered
            return dc.sum(hinge, axis=-1) / count


def total_loss(
    model: VrmModel,
    batch: PreferenceBatch,
    rng: np.random.Generator | None = None,
    lam: float = 0.1,
    variant: SupVariant | str = SupVariant.KL,
    prior_alpha0: float = 1.0,
    noise: LatentNoise | None = None,
    margin: float = DEFAULT_RANK_MARGIN,
    concentration: float = DEFAULT_DIR_CONCENTRATION,
) -> LossResult:
    """
    Batch loss -ELBO + lam * sup of the variational model.

    Supervision only counts examples that carry scores; the others
    contribute 0 to the batch mean. With ``lam`` = 0 the supervision term is
    skipped entirely and reported as 0.
    """
    if batch.size == 0:
        raise ValueError("Batch must not be empty")
    if lam < 0.0:
        raise DomainError(f"lam must be >= 0, got {lam}")
    terms = elbo_preference(model, batch, rng, prior_alpha0, noise)
    bt = dc.mean(terms.bt_loglik)
    kl_w = dc.mean(terms.kl_w)
    kl_z_pos = dc.mean(terms.kl_z_pos)
    kl_z_neg = dc.mean(terms.kl_z_neg)
    elbo = bt - kl_w - kl_z_pos - kl_z_neg

    if lam > 0.0 and batch.s_tilde is not None and batch.has_scores.any():
        mask = batch.has_scores.astype(np.float64)
        per_example = supervision_loss(terms.q_w, batch.s_tilde, variant, margin, concentration)
        sup = dc.mean(per_example * mask)
    else:
        sup = as_node(0.0)
    total = -elbo + lam * sup

    breakdown = LossBreakdown(
        bt_loglik=bt.item(),
        kl_w=kl_w.item(),
        kl_z_pos=kl_z_pos.item(),
        kl_z_neg=kl_z_neg.item(),
        sup=sup.item(),
        total=total.item(),
    )
    return LossResult(total, breakdown, terms)


def baseline_bt_loss(model: BaselineRm, batch: PreferenceBatch) -> LossResult:
    """Mean -log sigmoid(r(x, y+) - r(x, y-)) of the deterministic baseline."""
    if batch.size == 0:
        raise ValueError("Batch must not be empty")
    diff = model.baseline_reward(batch.x, batch.y_pos) - model.baseline_reward(batch.x, batch.y_neg)
    loss = -dc.mean(dc.log_sigmoid(diff))
    value = loss.item()
    return LossResult(loss, LossBreakdown(-value, 0.0, 0.0, 0.0, 0.0, value), None)


def supervision_divergence(model: VrmModel, batch: PreferenceBatch) -> float:
    """Mean categorical KL(w_mean || s_tilde) over the scored rows, no graph kept."""
    if batch.s_tilde is None or not batch.has_scores.any():
        return float("nan")
    w_mean = model.posterior_mean_weights(batch.x[batch.has_scores])
    target = batch.s_tilde[batch.has_scores]
    return float(np.mean(np.sum(w_mean * (np.log(w_mean) - np.log(target)), axis=-1)))
