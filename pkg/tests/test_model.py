import math

import numpy as np
import pytest

from src import diffcore as D
from src.config import ModelHyper, ModelKind
from src.errors import DomainError, SchemaError, ShapeError
from src.model import BaselineRm, VrmModel, build_model, load_checkpoint


@pytest.fixture
def vrm(tiny_hyper):
    return VrmModel.initialize(tiny_hyper, seed=5)


@pytest.fixture
def features(tiny_hyper, rng):
    """A batch of six prompts and responses."""
    return rng.normal(size=(6, tiny_hyper.d_x)), rng.normal(size=(6, tiny_hyper.d_y))


def test_weight_encoder_ignores_response(vrm, features):
    """Test that q(w | x) is the same whatever response is paired with x."""
    x, y = features
    alpha = vrm.encode_weights(x).alpha.value
    assert alpha.shape == (6, 3)
    assert np.all(alpha >= 1e-3)
    other = vrm.encode_features(x, -y)
    assert other.mu.shape == (6, 2)
    np.testing.assert_array_equal(vrm.encode_weights(x).alpha.value, alpha)


def test_zero_heads_give_prior_shape(vrm, features):
    """Test that zeroed heads give alpha = ln 2, mu = 0 and sigma = 1."""
    x, y = features
    vrm.params.zero_("weight_head").zero_("feature_head")
    np.testing.assert_allclose(vrm.encode_weights(x).alpha.value, math.log(2.0))
    q = vrm.encode_features(x, y)
    np.testing.assert_allclose(q.mu.value, 0.0)
    np.testing.assert_allclose(q.sigma.value, 1.0)


def test_concentration_floor(vrm, features):
    """Test that very negative logits are clamped at 1e-3."""
    x, _ = features
    vrm.params["weight_head.b"].value = np.full(3, -50.0)
    vrm.params.zero_("weight_head.w")
    np.testing.assert_allclose(vrm.encode_weights(x).alpha.value, 1e-3)


def test_reward_is_linear_in_weights(vrm, rng):
    """Test r(a w1 + (1 - a) w2, z) = a r(w1, z) + (1 - a) r(w2, z)."""
    z = rng.normal(size=(4, 2))
    w1 = rng.dirichlet(np.ones(3), size=4)
    w2 = rng.dirichlet(np.ones(3), size=4)
    a = 0.3
    mixed = vrm.decode_reward(a * w1 + (1 - a) * w2, z).value
    expected = a * vrm.decode_reward(w1, z).value + (1 - a) * vrm.decode_reward(w2, z).value
    np.testing.assert_allclose(mixed, expected, atol=1e-12)


def test_reward_at_vertex_is_head_value(vrm, rng):
    """Test that a one-hot weight picks one objective's reward."""
    z = rng.normal(size=(2, 2))
    heads = vrm.head_values(z).value
    np.testing.assert_allclose(vrm.decode_reward(np.tile([0.0, 1.0, 0.0], (2, 1)), z).value, heads[:, 1])


def test_off_simplex_weights_rejected(vrm):
    """Test that weights not summing to one raise a DomainError."""
    with pytest.raises(DomainError, match="simplex"):
        vrm.decode_reward(np.array([0.5, 0.6, 0.0]), np.zeros(2))


def test_feature_dimension_mismatch(vrm, features):
    """Test that a wrong prompt width raises a ShapeError naming both widths."""
    _, y = features
    with pytest.raises(ShapeError, match="x_feat"):
        vrm.posterior_scores(np.zeros((6, 5)), y)


def test_non_finite_features_rejected(vrm, features):
    """Test that NaN features raise a DomainError."""
    x, y = features
    x = x.copy()
    x[0, 0] = np.nan
    with pytest.raises(DomainError):
        vrm.encode_weights(x)


def test_posterior_scores_are_deterministic(vrm, features):
    """Test that scoring twice gives identical values."""
    x, y = features
    first = vrm.posterior_scores(x, y)
    assert first.shape == (6,)
    np.testing.assert_array_equal(vrm.posterior_scores(x, y), first)


def test_same_seed_same_model(tiny_hyper):
    """Test that two models from the same seed have identical parameters."""
    assert VrmModel.initialize(tiny_hyper, 9).params.equals(VrmModel.initialize(tiny_hyper, 9).params)


def test_schema_sizes(tiny_hyper):
    """Test the parameter shapes of both model kinds."""
    vrm_schema = VrmModel.schema(tiny_hyper)
    assert vrm_schema["weight_head.w"] == (5, 3)
    assert vrm_schema["feature_head.w"] == (5, 4)
    assert vrm_schema["reward_head.2.w2"] == (3, 1)
    baseline_schema = BaselineRm.schema(tiny_hyper)
    assert baseline_schema["backbone.0.w"] == (7, 5)
    assert "weight_head.w" not in baseline_schema


def test_baseline_scores(tiny_hyper, features):
    """Test that the baseline returns one finite score per row."""
    x, y = features
    model = build_model(ModelKind.BASELINE, tiny_hyper, seed=2)
    assert isinstance(model, BaselineRm)
    scores = model.posterior_scores(x, y)
    assert scores.shape == (6,)
    assert np.all(np.isfinite(scores))


def test_encoder_gradients_flow(vrm, features):
    """Test that the posterior mean weights are differentiable in every backbone parameter."""
    x, _ = features
    vrm.params.zero_grad()
    D.backward(D.sum(D.take(vrm.encode_weights(x).mean(), [0])))
    assert np.any(vrm.params["backbone.0.w"].grad != 0.0)
    assert np.any(vrm.params["weight_head.w"].grad != 0.0)


class TestCheckpoint:
    """Tests for saving and loading models."""

    @pytest.mark.parametrize("kind", ["vrm", "baseline"])
    def test_round_trip_scores(self, kind, tiny_hyper, features, tmp_path):
        """Test that a reloaded model scores exactly like the saved one."""
        x, y = features
        model = build_model(kind, tiny_hyper, seed=4)
        model.save(tmp_path / "checkpoint.json")
        loaded = load_checkpoint(tmp_path / "checkpoint.json")
        assert loaded.kind == ModelKind(kind)
        assert loaded.hyper == tiny_hyper
        np.testing.assert_array_equal(loaded.posterior_scores(x, y), model.posterior_scores(x, y))

    def test_mismatched_schema(self, tiny_hyper, tmp_path):
        """Test that parameters that do not fit the stored hyper raise a SchemaError."""
        model = VrmModel.initialize(tiny_hyper, 1)
        wrong = ModelHyper(k=4, j=2, hidden=5, head_hidden=3, layers=1, d_x=4, d_y=3)
        model.params.save(tmp_path / "bad.json", header={"kind": "vrm", "hyper": wrong.to_dict()})
        with pytest.raises(SchemaError, match="do not match"):
            load_checkpoint(tmp_path / "bad.json")

    def test_unknown_kind(self, tiny_hyper, tmp_path):
        """Test that an unknown model kind raises a SchemaError."""
        model = VrmModel.initialize(tiny_hyper, 1)
        model.params.save(tmp_path / "bad.json", header={"kind": "gpt", "hyper": tiny_hyper.to_dict()})
        with pytest.raises(SchemaError, match="Invalid checkpoint header"):
            load_checkpoint(tmp_path / "bad.json")
