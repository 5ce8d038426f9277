"""Per-video logit records and their line-delimited JSON interchange format.

One JSON object per line::

    {"video_id": "v0001", "model_tag": "oic", "verb_logits": [...], "noun_logits": [...]}

Any external video model can enter fusion and evaluation by exporting this.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError, DimensionMismatch


@dataclass
class LogitRecord:
    video_id: str
    verb_logits: np.ndarray
    noun_logits: np.ndarray
    model_tag: str = ""

    def __post_init__(self):
        self.verb_logits = np.asarray(self.verb_logits, dtype=np.float64)
        self.noun_logits = np.asarray(self.noun_logits, dtype=np.float64)
        for name in ("verb_logits", "noun_logits"):
            arr = getattr(self, name)
            if arr.ndim != 1:
                raise DimensionMismatch(f"{name} must be a vector")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} of {self.video_id} has non-finite entries")

    def logits(self, space: str) -> np.ndarray:
        return self.verb_logits if space == "verb" else self.noun_logits

    def to_json(self) -> str:
        return json.dumps({
            "video_id": self.video_id,
            "model_tag": self.model_tag,
            "verb_logits": [float(x) for x in self.verb_logits],
            "noun_logits": [float(x) for x in self.noun_logits],
        })


def write_logits(path, records: Iterable[LogitRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")
    return path


def read_logits(path, n_verbs: int | None = None, n_nouns: int | None = None) -> list[LogitRecord]:
    """Read a logit file, optionally checking the label-space sizes."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line, parse_constant=lambda c: math.nan)
                rec = LogitRecord(obj["video_id"], obj["verb_logits"], obj["noun_logits"], obj.get("model_tag", ""))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: bad logit record ({exc})") from None
            if n_verbs is not None and rec.verb_logits.size != n_verbs:
                raise DimensionMismatch(f"{path}:{line_no}: expected {n_verbs} verb logits")
            if n_nouns is not None and rec.noun_logits.size != n_nouns:
                raise DimensionMismatch(f"{path}:{line_no}: expected {n_nouns} noun logits")
            records.append(rec)
    return records
