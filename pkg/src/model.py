"""
Encoders, reward decoder and the Bradley-Terry baseline.

Both models share one backbone shape: affine+tanh layers over the
concatenated prompt and response features. The variational model reads the
backbone three ways: the weight head sees the prompt alone (response slots
zeroed) and outputs Dirichlet concentrations, the feature head sees the
prompt-response pair and outputs (mu, ln sigma), and K small reward heads
score the semantic features, mixed by the objective weights.
"""

import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Self

import numpy as np

from src import diffcore as dc
from src.config import ModelHyper, ModelKind
from src.diffcore import Node, ParamStore, as_node, value_of
from src.distributions import DirichletParams, GaussianParams
from src.errors import DomainError, SchemaError, ShapeError

logger = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-3
SIMPLEX_TOLERANCE = 1e-6


def _check_features(x, dim: int, name: str) -> Node:
    node = as_node(x)
    if node.ndim not in (1, 2) or node.shape[-1] != dim:
        raise ShapeError(f"{name} shape mismatch: got {node.shape}, model expects (..., {dim})")
    if not np.all(np.isfinite(node.value)):
        raise DomainError(f"{name} must be finite")
    return node


class RewardModel(ABC):
    """
    Abstract base class for a pairwise reward model.

    Attributes:
        hyper (ModelHyper): Dimensions of the network.
        params (ParamStore): Trainable parameters.
    """

    kind: ModelKind

    def __init__(self, hyper: ModelHyper, params: ParamStore):
        self.hyper = hyper
        self.params = params

    @classmethod
    def initialize(cls, hyper: ModelHyper, seed: int) -> Self:
        """Create a model with freshly initialized parameters."""
        return cls(hyper, ParamStore.initialize(cls.schema(hyper), seed))

    @classmethod
    def schema(cls, hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
        shapes = {}
        width = hyper.d_x + hyper.d_y
        for layer in range(hyper.layers):
            shapes[f"backbone.{layer}.w"] = (width, hyper.hidden)
            shapes[f"backbone.{layer}.b"] = (hyper.hidden,)
            width = hyper.hidden
        return shapes

    def backbone(self, inputs: Node) -> Node:
        h = inputs
        for layer in range(self.hyper.layers):
            h = dc.tanh(dc.affine(h, self.params[f"backbone.{layer}.w"], self.params[f"backbone.{layer}.b"]))
        return h

    def _pair_inputs(self, x_feat, y_feat) -> Node:
        x = _check_features(x_feat, self.hyper.d_x, "x_feat")
        y = _check_features(y_feat, self.hyper.d_y, "y_feat")
        if x.shape[:-1] != y.shape[:-1]:
            raise ShapeError(f"Shape mismatch: {x.shape} and {y.shape}")
        return dc.concat(x, y)

    @abstractmethod
    def posterior_scores(self, x_feat: np.ndarray, y_feat: np.ndarray) -> np.ndarray:
        """Deterministic scalar score per (x, y) row used for evaluation."""
        raise NotImplementedError("Subclasses must implement this method.")

    def header(self) -> dict:
        return {"kind": str(self.kind), "hyper": self.hyper.to_dict()}

    def save(self, path: str | Path) -> None:
        self.params.save(path, header=self.header())


class VrmModel(RewardModel):
    """Variational reward model with Dirichlet weights and Gaussian features."""

    kind = ModelKind.VRM

    @classmethod
    def schema(cls, hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
        shapes = super().schema(hyper)
        shapes["weight_head.w"] = (hyper.hidden, hyper.k)
        shapes["weight_head.b"] = (hyper.k,)
        shapes["feature_head.w"] = (hyper.hidden, 2 * hyper.j)
        shapes["feature_head.b"] = (2 * hyper.j,)
        for k in range(hyper.k):
            shapes[f"reward_head.{k}.w1"] = (hyper.j, hyper.head_hidden)
            shapes[f"reward_head.{k}.b1"] = (hyper.head_hidden,)
            shapes[f"reward_head.{k}.w2"] = (hyper.head_hidden, 1)
            shapes[f"reward_head.{k}.b2"] = (1,)
        return shapes

    def encode_weights(self, x_feat) -> DirichletParams:
        """
        q(w | x) = Dir(alpha), alpha = max(softplus(head(backbone(x))), 1e-3).

        The backbone sees the prompt with the response slots zeroed, so the
        weights depend on x alone.
        """
        x = _check_features(x_feat, self.hyper.d_x, "x_feat")
        inputs = dc.concat(x, np.zeros(x.shape[:-1] + (self.hyper.d_y,)))
        logits = dc.affine(self.backbone(inputs), self.params["weight_head.w"], self.params["weight_head.b"])
        raw = dc.softplus(logits)
        if np.any(raw.value <= ALPHA_FLOOR):
            logger.debug("Clamping %d concentration(s) at %g", int(np.sum(raw.value <= ALPHA_FLOOR)), ALPHA_FLOOR)
        return DirichletParams(dc.clamp_min(raw, ALPHA_FLOOR))

    def encode_features(self, x_feat, y_feat) -> GaussianParams:
        """q(z | x, y) = N(mu, diag(sigma^2)) with sigma = exp(ln sigma)."""
        out = dc.affine(
            self.backbone(self._pair_inputs(x_feat, y_feat)),
            self.params["feature_head.w"],
            self.params["feature_head.b"],
        )
        j = self.hyper.j
        mu = dc.take(out, np.arange(j))
        log_sigma = dc.take(out, np.arange(j, 2 * j))
        return GaussianParams(mu, dc.exp(log_sigma), log_sigma)

    def head_values(self, z) -> Node:
        """Per-objective rewards f_k(z), one column per objective."""
        z = _check_features(z, self.hyper.j, "z")
        columns = []
        for k in range(self.hyper.k):
            hidden = dc.tanh(dc.affine(z, self.params[f"reward_head.{k}.w1"], self.params[f"reward_head.{k}.b1"]))
            columns.append(dc.affine(hidden, self.params[f"reward_head.{k}.w2"], self.params[f"reward_head.{k}.b2"]))
        return dc.concat(*columns)

    def decode_reward(self, w, z) -> Node:
        """
        r(w, z) = Σ_k w_k f_k(z), linear in w for fixed z.

        Raises:
            DomainError: If a row of w is off the simplex by more than 1e-6.
        """
        w_value = value_of(w)
        if w_value.shape[-1] != self.hyper.k:
            raise ShapeError(f"w shape mismatch: got {w_value.shape}, model expects (..., {self.hyper.k})")
        if np.any(w_value < -SIMPLEX_TOLERANCE) or np.any(
            np.abs(np.sum(w_value, axis=-1) - 1.0) > SIMPLEX_TOLERANCE
        ):
            raise DomainError("w must lie on the probability simplex")
        return dc.dot(as_node(w), self.head_values(z))

    def posterior_mean_weights(self, x_feat) -> np.ndarray:
        return self.encode_weights(x_feat).mean().value

    def posterior_scores(self, x_feat, y_feat) -> np.ndarray:
        """r(alpha / Σalpha, mu(x, y)) with no sampling."""
        w_mean = self.posterior_mean_weights(x_feat)
        mu = self.encode_features(x_feat, y_feat).mu
        return self.decode_reward(w_mean, mu.value).value


class BaselineRm(RewardModel):
    """Deterministic scalar reward r(x, y) on the shared backbone shape."""

    kind = ModelKind.BASELINE

    @classmethod
    def schema(cls, hyper: ModelHyper) -> dict[str, tuple[int, ...]]:
        shapes = super().schema(hyper)
        shapes["reward_head.w"] = (hyper.hidden, 1)
        shapes["reward_head.b"] = (1,)
        return shapes

    def baseline_reward(self, x_feat, y_feat) -> Node:
        out = dc.affine(
            self.backbone(self._pair_inputs(x_feat, y_feat)),
            self.params["reward_head.w"],
            self.params["reward_head.b"],
        )
        return dc.sum(out, axis=-1)

    def posterior_scores(self, x_feat, y_feat) -> np.ndarray:
        return self.baseline_reward(x_feat, y_feat).value


MODEL_CLASSES: dict[ModelKind, type[RewardModel]] = {
    ModelKind.VRM: VrmModel,
    ModelKind.BASELINE: BaselineRm,
}


def build_model(kind: ModelKind | str, hyper: ModelHyper, seed: int) -> RewardModel:
    return MODEL_CLASSES[ModelKind(kind)].initialize(hyper, seed)


def load_checkpoint(path: str | Path) -> RewardModel:
    """
    Rebuild a model from a checkpoint written by ``RewardModel.save``.

    Raises:
        SchemaError: If the header names an unknown kind or the stored
            parameters do not match the hyperparameter schema.
    """
    params, header = ParamStore.load(path)
    try:
        kind = ModelKind(header["kind"])
        hyper = ModelHyper.from_dict(header["hyper"])
    except (KeyError, ValueError) as e:
        raise SchemaError(f"Invalid checkpoint header in {path}: {e}") from None
    cls = MODEL_CLASSES[kind]
    expected = cls.schema(hyper)
    if params.schema() != expected:
        raise SchemaError(f"Checkpoint parameters {params.schema()} do not match schema {expected}")
    return cls(hyper, params)
