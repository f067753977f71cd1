import json
from dataclasses import replace

import numpy as np
import pytest

from src.errors import SchemaError
from src.record_reader import save_jsonl
from src.synthdata import CausalPreferenceWorld, SplitDataset, generate, inject_spurious


def test_split_sizes(small_dataset):
    """Tests the 90/10 split and the manifest indices."""
    assert len(small_dataset.train) == 180
    assert len(small_dataset.eval) == 20
    manifest = small_dataset.manifest
    assert sorted(manifest["train_indices"] + manifest["eval_indices"]) == list(range(200))
    assert manifest["schema"] == {"d_x": 4, "d_y": 3, "k": 3}
    assert manifest["format_version"] == 1


def test_same_config_same_data(small_generator, small_dataset):
    """Tests that generation is deterministic in the config."""
    again = generate(small_generator)
    assert all(a.same_as(b) for a, b in zip(again.train, small_dataset.train))
    assert all(a.same_as(b) for a, b in zip(again.eval, small_dataset.eval))
    assert again.manifest == small_dataset.manifest


def test_other_seed_other_data(small_generator, small_dataset):
    """Tests that a different seed changes the sample."""
    other = generate(replace(small_generator, seed=4))
    assert not other.train[0].same_as(small_dataset.train[0])


def test_truth_is_consistent(small_generator, small_dataset):
    """Tests that recorded truth matches the world's maps."""
    world = CausalPreferenceWorld(small_generator)
    for example in small_dataset.train[:10]:
        truth = example.truth
        np.testing.assert_allclose(truth.w_star, world.true_weights(example.x_feat))
        assert truth.w_star.sum() == pytest.approx(1.0)
        np.testing.assert_allclose(truth.q_pos, world.qualities(example.x_feat, example.y_pos_feat))
        gap = world.posterior_scores(example.x_feat, example.y_pos_feat) - world.posterior_scores(
            example.x_feat, example.y_neg_feat
        )
        assert truth.gap == pytest.approx(gap)


def test_labels_follow_true_reward(small_generator):
    """Tests that a near-zero temperature labels every pair by the sign of the true gap."""
    world = CausalPreferenceWorld(replace(small_generator, temperature=1e-6))
    examples = world.sample(1000, np.random.default_rng(0))
    assert all(e.truth.gap > 0.0 for e in examples)


def test_labels_are_calibrated(small_generator):
    """Tests that at unit temperature the preference rate per gap bin matches sigmoid(gap)."""
    world = CausalPreferenceWorld(replace(small_generator, temperature=1.0))
    gaps = np.array([e.truth.gap for e in world.sample(10_000, np.random.default_rng(0))])
    size = np.abs(gaps)
    edges = np.quantile(size, np.linspace(0.0, 1.0, 11))
    bins = np.clip(np.searchsorted(edges, size, side="right") - 1, 0, 9)
    for b in range(10):
        in_bin = bins == b
        rate = np.mean(gaps[in_bin] > 0.0)
        expected = np.mean(1.0 / (1.0 + np.exp(-size[in_bin])))
        se = np.sqrt(expected * (1.0 - expected) / in_bin.sum())
        assert abs(rate - expected) < 4.0 * se


def test_scores_are_noisy_qualities(small_dataset):
    """Tests that raw scores stay close to the latent qualities."""
    residual = np.stack([e.scores_pos - e.truth.q_pos for e in small_dataset.train])
    assert residual.std() == pytest.approx(0.1, rel=0.2)


def test_dataset_properties(small_dataset):
    """Tests the dimension properties."""
    assert (small_dataset.d_x, small_dataset.d_y, small_dataset.k) == (4, 3, 3)


def test_save_and_load(small_dataset, tmp_path):
    """Tests that saved splits load back with their manifest."""
    small_dataset.save(tmp_path)
    assert json.loads((tmp_path / "manifest.json").read_text()) == small_dataset.manifest
    loaded = SplitDataset.load(tmp_path / "train.jsonl", tmp_path / "eval.jsonl")
    assert all(a.same_as(b) for a, b in zip(loaded.train, small_dataset.train))
    assert len(loaded.eval) == 20
    assert loaded.manifest == small_dataset.manifest


def test_saved_files_are_reproducible(small_generator, tmp_path):
    """Tests that two generations write byte-identical files."""
    generate(small_generator).save(tmp_path / "a")
    generate(small_generator).save(tmp_path / "b")
    for name in ("train.jsonl", "eval.jsonl", "manifest.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSpurious:
    """Tests for the injected spurious feature."""

    def test_full_strength_marks_preferred(self, small_dataset):
        """Tests that rho = 1 puts the marker on every preferred train response."""
        confounded = inject_spurious(small_dataset, 1.0, np.random.default_rng(0))
        assert confounded.d_y == 4
        assert all(e.y_pos_feat[-1] == 1.0 and e.y_neg_feat[-1] == 0.0 for e in confounded.train)
        assert confounded.manifest["schema"]["d_y"] == 4
        assert confounded.manifest["spurious"] == 1.0

    def test_eval_marker_is_uninformative(self, small_generator):
        """Tests that the eval marker is a fair coin."""
        dataset = generate(replace(small_generator, n=2000, spurious=1.0))
        share = np.mean([e.y_pos_feat[-1] for e in dataset.eval])
        assert share == pytest.approx(0.5, abs=0.12)

    def test_original_features_untouched(self, small_dataset):
        """Tests that only a column is appended."""
        confounded = inject_spurious(small_dataset, 0.8, np.random.default_rng(0))
        np.testing.assert_array_equal(confounded.train[0].y_pos_feat[:3], small_dataset.train[0].y_pos_feat)
        np.testing.assert_array_equal(confounded.train[0].x_feat, small_dataset.train[0].x_feat)
        assert small_dataset.d_y == 3

    def test_invalid_strength(self, small_dataset):
        """Tests that rho outside [0, 1] raises a ValueError."""
        with pytest.raises(ValueError, match="must lie in"):
            inject_spurious(small_dataset, 1.5, np.random.default_rng(0))

    def test_world_ignores_marker(self, small_generator, small_dataset):
        """Tests that the true reward does not depend on the appended column."""
        world = CausalPreferenceWorld(small_generator)
        example = small_dataset.train[0]
        marked = np.append(example.y_pos_feat, 1.0)
        assert world.posterior_scores(example.x_feat, marked) == pytest.approx(
            world.posterior_scores(example.x_feat, example.y_pos_feat)
        )

    def test_partial_strength_rates(self, small_generator):
        """Tests that rho = 0.9 marks the preferred train response 90% of the time and eval half the time."""
        dataset = generate(replace(small_generator, n=5000, spurious=0.9))
        train_share = np.mean([e.y_pos_feat[-1] for e in dataset.train])
        eval_share = np.mean([e.y_pos_feat[-1] for e in dataset.eval])
        assert abs(train_share - 0.9) < 4.0 * np.sqrt(0.9 * 0.1 / len(dataset.train))
        assert abs(eval_share - 0.5) < 4.0 * np.sqrt(0.25 / len(dataset.eval))

    @pytest.mark.parametrize("rho", [0.0, 0.3, 0.5])
    def test_weak_strength_is_uninformative(self, small_dataset, rho):
        """Tests that rho up to 1/2 never anti-correlates the marker with the label."""
        dataset = SplitDataset(small_dataset.train * 20, [], small_dataset.manifest)
        confounded = inject_spurious(dataset, rho, np.random.default_rng(0))
        share = np.mean([e.y_pos_feat[-1] for e in confounded.train])
        assert abs(share - 0.5) < 4.0 * np.sqrt(0.25 / len(confounded.train))


def test_load_rejects_split_schema_mismatch(small_dataset, tmp_path):
    """Tests that eval records with another score length than train fail to load."""
    small_dataset.save(tmp_path)
    wider = [
        replace(e, scores_pos=np.append(e.scores_pos, 0.0), scores_neg=np.append(e.scores_neg, 0.0))
        for e in small_dataset.eval
    ]
    save_jsonl(wider, tmp_path / "eval.jsonl")
    with pytest.raises(SchemaError, match="differs from"):
        SplitDataset.load(tmp_path / "train.jsonl", tmp_path / "eval.jsonl")
