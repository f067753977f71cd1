import numpy as np
import pytest

from src.embedder import HashedBagEmbedder
from src.errors import SchemaError
from src.record import FeatureRecord, PreferenceExample, TextRecord, Truth, detect_record_class


@pytest.fixture
def feature_record():
    """A numeric record with scores and ground truth."""
    return {
        "x_feat": [0.1, 0.2],
        "y_pos_feat": [1.0, 0.0, -1.0],
        "y_neg_feat": [0.5, 0.5, 0.5],
        "scores_pos": [0.9, 0.1],
        "scores_neg": [0.2, 0.3],
        "meta": {"source": "unit", "truth": {"w_star": [0.7, 0.3], "q_pos": [1, 0], "q_neg": [0, 1], "gap": 0.4}},
    }


@pytest.fixture
def text_record():
    """A text record without scores."""
    return {"prompt": "how do I sort a list", "response_pos": "use sorted", "response_neg": "you cannot"}


def test_feature_record_from_json(feature_record):
    """Tests parsing a numeric record into a PreferenceExample."""
    example = FeatureRecord.from_json(feature_record)
    np.testing.assert_array_equal(example.x_feat, [0.1, 0.2])
    np.testing.assert_array_equal(example.scores_pos, [0.9, 0.1])
    assert example.meta == {"source": "unit"}
    assert example.truth.gap == 0.4
    np.testing.assert_array_equal(example.truth.w_star, [0.7, 0.3])


def test_feature_record_optional_fields_absent():
    """Tests that missing optional fields become None or an empty dict."""
    example = FeatureRecord.from_json({"x_feat": [1], "y_pos_feat": [2], "y_neg_feat": [3]})
    assert example.scores_pos is None
    assert example.scores_neg is None
    assert example.truth is None
    assert example.meta == {}


def test_to_json_round_trip(feature_record):
    """Tests that an example written to JSON parses back to the same example."""
    example = FeatureRecord.from_json(feature_record)
    assert FeatureRecord.from_json(example.to_json()).same_as(example)


def test_missing_mandatory_field(feature_record):
    """Tests that a missing mandatory field raises a SchemaError naming it."""
    del feature_record["y_neg_feat"]
    with pytest.raises(SchemaError, match="Missing mandatory field 'y_neg_feat'"):
        FeatureRecord.from_json(feature_record)


@pytest.mark.parametrize("bad", ["0.1", [0.1, "a"], [True, 1.0]])
def test_vector_kind(feature_record, bad):
    """Tests that non-numeric vectors are rejected."""
    feature_record["x_feat"] = bad
    with pytest.raises(SchemaError, match="array of numbers"):
        FeatureRecord.from_json(feature_record)


def test_invalid_truth(feature_record):
    """Tests that an incomplete meta.truth raises a SchemaError."""
    del feature_record["meta"]["truth"]["gap"]
    with pytest.raises(SchemaError, match="Invalid meta.truth"):
        FeatureRecord.from_json(feature_record)


def test_text_record_embeds(text_record):
    """Tests that text is embedded with the hashed bag of tokens."""
    example = TextRecord.from_json(text_record, d_x=6, d_y=4)
    np.testing.assert_array_equal(example.x_feat, HashedBagEmbedder(6).embed("how do I sort a list"))
    assert example.y_pos_feat.shape == (4,)
    assert np.linalg.norm(example.y_neg_feat) == pytest.approx(1.0)


def test_text_record_needs_dimensions(text_record):
    """Tests that text records cannot be read without embedding dimensions."""
    with pytest.raises(SchemaError, match="d_x and d_y"):
        TextRecord.from_json(text_record)


def test_text_field_kind(text_record):
    """Tests that a non-string prompt is rejected."""
    text_record["prompt"] = 3
    with pytest.raises(SchemaError, match="must be a string"):
        TextRecord.from_json(text_record, d_x=4, d_y=4)


def test_detect_record_class(feature_record, text_record):
    """Tests layout detection for each record kind."""
    assert detect_record_class(feature_record) is FeatureRecord
    assert detect_record_class(text_record) is TextRecord


def test_detect_mixed_record(feature_record, text_record):
    """Tests that a record mixing layouts is rejected."""
    with pytest.raises(SchemaError, match="mixes text and numeric"):
        detect_record_class({**feature_record, **text_record})


def test_detect_no_layout():
    """Tests that a record with neither layout is rejected."""
    with pytest.raises(SchemaError, match="Missing mandatory field"):
        detect_record_class({"scores_pos": [1.0]})


def test_embedder_is_stable():
    """Tests that embedding is deterministic, case-insensitive and zero for empty text."""
    embedder = HashedBagEmbedder(8)
    np.testing.assert_array_equal(embedder.embed("Hello World"), embedder.embed("hello   world"))
    np.testing.assert_array_equal(embedder.embed(""), np.zeros(8))


def test_same_as_detects_differences():
    """Tests field-by-field comparison of examples."""
    base = PreferenceExample(np.zeros(2), np.ones(2), np.ones(2), truth=Truth(np.ones(2) / 2, np.ones(2), np.zeros(2), 1.0))
    other = PreferenceExample(np.zeros(2), np.ones(2), np.ones(2))
    assert not base.same_as(other)
    other.truth = Truth(np.ones(2) / 2, np.ones(2), np.zeros(2), 1.0)
    assert base.same_as(other)
    other.scores_pos = np.ones(2)
    assert not base.same_as(other)
