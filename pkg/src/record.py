from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import NamedTuple, Self

import numpy as np

from src.embedder import HashedBagEmbedder
from src.errors import SchemaError


class Field(NamedTuple):
    """
    Represents a field definition within a JSONL preference record.

    Attributes:
        kind (str): ``"text"`` for strings, ``"vector"`` for number arrays,
            ``"object"`` for free-form JSON objects.
        required (bool): Whether a record must carry the field.
    """

    kind: str
    required: bool


class Truth(NamedTuple):
    """
    Ground truth of a synthetic pair.

    Attributes:
        w_star (np.ndarray): True objective weights for the prompt.
        q_pos (np.ndarray): Latent qualities of the preferred response.
        q_neg (np.ndarray): Latent qualities of the dispreferred response.
        gap (float): True reward gap Σ_k w*_k (q+_k - q-_k).
    """

    w_star: np.ndarray
    q_pos: np.ndarray
    q_neg: np.ndarray
    gap: float

    def to_json(self) -> dict:
        return {
            "w_star": self.w_star.tolist(),
            "q_pos": self.q_pos.tolist(),
            "q_neg": self.q_neg.tolist(),
            "gap": self.gap,
        }

    @classmethod
    def from_json(cls, data: dict) -> Self:
        return cls(
            np.asarray(data["w_star"], dtype=np.float64),
            np.asarray(data["q_pos"], dtype=np.float64),
            np.asarray(data["q_neg"], dtype=np.float64),
            float(data["gap"]),
        )


def _same(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


@dataclass(eq=False)
class PreferenceExample:
    """
    One (x, y+, y-) triple as feature vectors.

    The preferred response always comes first; the label is implicit in the
    field order.
    """

    x_feat: np.ndarray
    y_pos_feat: np.ndarray
    y_neg_feat: np.ndarray
    scores_pos: np.ndarray | None = None
    scores_neg: np.ndarray | None = None
    truth: Truth | None = None
    meta: dict = field(default_factory=dict)

    def same_as(self, other: "PreferenceExample") -> bool:
        """Field-by-field equality (arrays compared exactly)."""
        if not (
            _same(self.x_feat, other.x_feat)
            and _same(self.y_pos_feat, other.y_pos_feat)
            and _same(self.y_neg_feat, other.y_neg_feat)
            and _same(self.scores_pos, other.scores_pos)
            and _same(self.scores_neg, other.scores_neg)
            and self.meta == other.meta
        ):
            return False
        if self.truth is None or other.truth is None:
            return self.truth is None and other.truth is None
        return all(_same(np.asarray(a), np.asarray(b)) for a, b in zip(self.truth, other.truth))

    def to_json(self) -> dict:
        """Numeric JSONL record; truth travels under ``meta.truth``."""
        record = {
            "x_feat": self.x_feat.tolist(),
            "y_pos_feat": self.y_pos_feat.tolist(),
            "y_neg_feat": self.y_neg_feat.tolist(),
        }
        if self.scores_pos is not None:
            record["scores_pos"] = self.scores_pos.tolist()
        if self.scores_neg is not None:
            record["scores_neg"] = self.scores_neg.tolist()
        meta = dict(self.meta)
        if self.truth is not None:
            meta["truth"] = self.truth.to_json()
        if meta:
            record["meta"] = meta
        return record


class PreferenceRecord(ABC):
    """Abstract base class for a JSONL record layout."""

    SCHEMA: dict[str, Field] = {}

    @classmethod
    def matches(cls, record: dict) -> bool:
        """Whether the record uses this layout's mandatory fields."""
        return any(name in record for name, spec in cls.SCHEMA.items() if spec.required)

    @classmethod
    def validate(cls, record: dict) -> None:
        """
        Check mandatory fields and value kinds.

        Raises:
            SchemaError: On a missing field or a value of the wrong kind.
        """
        for name, spec in cls.SCHEMA.items():
            if name not in record:
                if spec.required:
                    raise SchemaError(f"Missing mandatory field '{name}'")
                continue
            value = record[name]
            if spec.kind == "text" and not isinstance(value, str):
                raise SchemaError(f"Field '{name}' must be a string")
            if spec.kind == "vector" and not (
                isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
            ):
                raise SchemaError(f"Field '{name}' must be an array of numbers")
            if spec.kind == "object" and not isinstance(value, dict):
                raise SchemaError(f"Field '{name}' must be an object")

    @classmethod
    @abstractmethod
    def from_json(cls, record: dict, d_x: int | None = None, d_y: int | None = None) -> PreferenceExample:
        """Create a PreferenceExample from a parsed JSON object."""
        raise NotImplementedError("Subclasses must implement this method.")

    @staticmethod
    def _optional_vector(record: dict, name: str) -> np.ndarray | None:
        return None if name not in record else np.asarray(record[name], dtype=np.float64)

    @classmethod
    def _meta_and_truth(cls, record: dict) -> tuple[dict, Truth | None]:
        meta = dict(record.get("meta", {}))
        truth = meta.pop("truth", None)
        try:
            return meta, None if truth is None else Truth.from_json(truth)
        except (KeyError, TypeError, ValueError) as e:
            raise SchemaError(f"Invalid meta.truth: {e}") from None


class FeatureRecord(PreferenceRecord):
    """Record carrying numeric feature vectors."""

    SCHEMA = {
        "x_feat": Field("vector", True),
        "y_pos_feat": Field("vector", True),
        "y_neg_feat": Field("vector", True),
        "scores_pos": Field("vector", False),
        "scores_neg": Field("vector", False),
        "meta": Field("object", False),
    }

    @classmethod
    def from_json(cls, record: dict, d_x: int | None = None, d_y: int | None = None) -> PreferenceExample:
        cls.validate(record)
        meta, truth = cls._meta_and_truth(record)
        return PreferenceExample(
            x_feat=np.asarray(record["x_feat"], dtype=np.float64),
            y_pos_feat=np.asarray(record["y_pos_feat"], dtype=np.float64),
            y_neg_feat=np.asarray(record["y_neg_feat"], dtype=np.float64),
            scores_pos=cls._optional_vector(record, "scores_pos"),
            scores_neg=cls._optional_vector(record, "scores_neg"),
            truth=truth,
            meta=meta,
        )


class TextRecord(PreferenceRecord):
    """Record carrying raw text, embedded with hashed bag-of-tokens."""

    SCHEMA = {
        "prompt": Field("text", True),
        "response_pos": Field("text", True),
        "response_neg": Field("text", True),
        "scores_pos": Field("vector", False),
        "scores_neg": Field("vector", False),
        "meta": Field("object", False),
    }

    @classmethod
    def from_json(cls, record: dict, d_x: int | None = None, d_y: int | None = None) -> PreferenceExample:
        if d_x is None or d_y is None:
            raise SchemaError("Text records need the embedding dimensions d_x and d_y")
        cls.validate(record)
        prompt_embedder, response_embedder = HashedBagEmbedder(d_x), HashedBagEmbedder(d_y)
        meta, truth = cls._meta_and_truth(record)
        return PreferenceExample(
            x_feat=prompt_embedder.embed(record["prompt"]),
            y_pos_feat=response_embedder.embed(record["response_pos"]),
            y_neg_feat=response_embedder.embed(record["response_neg"]),
            scores_pos=cls._optional_vector(record, "scores_pos"),
            scores_neg=cls._optional_vector(record, "scores_neg"),
            truth=truth,
            meta=meta,
        )


RECORD_CLASSES: tuple[type[PreferenceRecord], ...] = (FeatureRecord, TextRecord)


def detect_record_class(record: dict) -> type[PreferenceRecord]:
    """
    Pick the layout a record uses.

    Raises:
        SchemaError: If the record mixes text and numeric fields or matches
            no layout.
    """
    matching = [cls for cls in RECORD_CLASSES if cls.matches(record)]
    if len(matching) > 1:
        raise SchemaError("Record mixes text and numeric fields")
    if not matching:
        raise SchemaError(
            "Missing mandatory field: expected 'prompt'/'response_pos'/'response_neg' "
            "or 'x_feat'/'y_pos_feat'/'y_neg_feat'"
        )
    return matching[0]
