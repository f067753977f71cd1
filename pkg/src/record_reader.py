import json
import logging
from pathlib import Path
from typing import Type

import numpy as np

from src.errors import SchemaError
from src.record import PreferenceExample, PreferenceRecord, detect_record_class

logger = logging.getLogger(__name__)


class RecordReader:
    """
    A reader for JSONL files of preference pairs.

    Each non-blank line is one JSON object, either a text record or a
    numeric feature record. A file must use a single layout, every record
    must have the same feature dimensions as the first one, and every score
    vector the same length as the first scored record.
    """

    def __init__(self, file_path: str | Path, d_x: int | None = None, d_y: int | None = None):
        """
        Initialize the RecordReader.

        Args:
            file_path: The path to the JSONL file to be read.
            d_x: Prompt embedding dimension, needed for text records.
            d_y: Response embedding dimension, needed for text records.
        """
        self.file_path = Path(file_path)
        self.d_x = d_x
        self.d_y = d_y
        self.data: list[PreferenceExample] = []
        self.RecordClass: Type[PreferenceRecord] | None = None
        self.score_k: int | None = None

    def read(self, RecordClass: Type[PreferenceRecord] | None = None) -> list[PreferenceExample]:
        """
        Read and validate every record of the file.

        Args:
            RecordClass: Layout to require; detected from the first record
                when omitted.

        Returns:
            The parsed examples, empty for an empty file.

        Raises:
            SchemaError: With the 1-based line number of the first bad record.
        """
        self.RecordClass = RecordClass
        self.score_k = None
        self.data = []
        with self.file_path.open("r", encoding="utf-8") as file:
            for line_number, line in enumerate(file, start=1):
                if not line.strip():
                    continue
                try:
                    self.data.append(self._parse(line))
                except SchemaError as e:
                    raise SchemaError(f"{self.file_path}:{line_number}: {e}") from None
        if not self.data:
            logger.warning("No records in %s", self.file_path)
        return self.data

    def _parse(self, line: str) -> PreferenceExample:
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise SchemaError(f"Invalid JSON: {e.msg}") from None
        if not isinstance(record, dict):
            raise SchemaError("Record must be a JSON object")
        RecordClass = detect_record_class(record)
        if self.RecordClass is None:
            self.RecordClass = RecordClass
        elif RecordClass is not self.RecordClass:
            raise SchemaError(
                f"Mixed record layouts: expected {self.RecordClass.__name__}, found {RecordClass.__name__}"
            )
        example = RecordClass.from_json(record, self.d_x, self.d_y)
        self._validate_dimensions(example)
        return example

    def _validate_dimensions(self, example: PreferenceExample) -> None:
        """
        Check the example against the dimensions of the first record.

        Raises:
            SchemaError: On a dimension change or a non-finite value.
        """
        if example.y_pos_feat.shape != example.y_neg_feat.shape:
            raise SchemaError(
                f"Response feature dimensions differ: {example.y_pos_feat.size} and {example.y_neg_feat.size}"
            )
        if example.scores_pos is not None and example.scores_neg is not None:
            if example.scores_pos.shape != example.scores_neg.shape:
                raise SchemaError("scores_pos and scores_neg have different lengths")
        for name in ("x_feat", "y_pos_feat", "y_neg_feat", "scores_pos", "scores_neg"):
            value = getattr(example, name)
            if value is not None and not np.all(np.isfinite(value)):
                raise SchemaError(f"Field '{name}' holds a non-finite value")
        if self.data:
            first = self.data[0]
            if example.x_feat.shape != first.x_feat.shape or example.y_pos_feat.shape != first.y_pos_feat.shape:
                raise SchemaError(
                    f"Feature dimensions ({example.x_feat.size}, {example.y_pos_feat.size}) differ from "
                    f"the first record ({first.x_feat.size}, {first.y_pos_feat.size})"
                )
        for scores in (example.scores_pos, example.scores_neg):
            if scores is None:
                continue
            if self.score_k is None:
                self.score_k = scores.size
            elif scores.size != self.score_k:
                raise SchemaError(f"Score length {scores.size} differs from the first scored record ({self.score_k})")

    def get_data(self) -> list[PreferenceExample]:
        return self.data


def load_jsonl(path: str | Path, d_x: int | None = None, d_y: int | None = None) -> list[PreferenceExample]:
    return RecordReader(path, d_x, d_y).read()


def save_jsonl(examples: list[PreferenceExample], path: str | Path) -> None:
    """Write one numeric record per line; floats keep their exact repr."""
    with Path(path).open("w", encoding="utf-8") as file:
        for example in examples:
            file.write(json.dumps(example.to_json()) + "\n")
