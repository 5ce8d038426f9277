"""On-disk dataset layout shared by every command.

    <root>/header.json      label spaces, splits, tail classes, unseen participants
    <root>/labels.jsonl     {"video_id", "verb", "noun", "participant"} per line
    <root>/detections.tsv   detection manifest (see region_ingest)
    <root>/frames/<video_id>/<frame:06d>.png
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, UnknownVideo
from .region_ingest import RegionSet, build_region_sets, load_manifest

HEADER_FORMAT = "sos-dataset/v1"
HEADER_FILE = "header.json"
LABELS_FILE = "labels.jsonl"
MANIFEST_FILE = "detections.tsv"
FRAMES_DIR = "frames"
BASE_LOGITS_FILE = "base_logits.jsonl"


@dataclass
class DatasetHeader:
    n_verbs: int
    n_nouns: int
    splits: dict[str, list[str]] = field(default_factory=dict)
    tail_verbs: list[int] = field(default_factory=list)
    tail_nouns: list[int] = field(default_factory=list)
    unseen_participants: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"format": HEADER_FORMAT, **asdict(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetHeader":
        if obj.get("format") != HEADER_FORMAT:
            raise DataError(f"unsupported dataset header format {obj.get('format')!r}")
        fields = {k: obj[k] for k in ("n_verbs", "n_nouns") if k in obj}
        if len(fields) != 2:
            raise DataError("dataset header must declare n_verbs and n_nouns")
        return cls(splits=obj.get("splits", {}), tail_verbs=obj.get("tail_verbs", []),
                   tail_nouns=obj.get("tail_nouns", []),
                   unseen_participants=obj.get("unseen_participants", []),
                   extra=obj.get("extra", {}), **fields)

    def tail(self, space: str) -> set[int]:
        return set(self.tail_verbs if space == "verb" else self.tail_nouns)


@dataclass(frozen=True)
class VideoLabel:
    verb: int
    noun: int
    participant: str = ""


def write_header(path, header: DatasetHeader) -> None:
    Path(path).write_text(json.dumps(header.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def read_header(path) -> DatasetHeader:
    try:
        return DatasetHeader.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def write_labels(path, labels: dict[str, VideoLabel]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid in sorted(labels):
            lab = labels[vid]
            fh.write(json.dumps({"video_id": vid, "verb": lab.verb, "noun": lab.noun,
                                 "participant": lab.participant}) + "\n")


def read_labels(path) -> dict[str, VideoLabel]:
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                labels[obj["video_id"]] = VideoLabel(int(obj["verb"]), int(obj["noun"]), str(obj.get("participant", "")))
            except (KeyError, ValueError, TypeError) as exc:
                raise DataError(f"{path}:{line_no}: bad label record ({exc})") from None
    return labels


class DirectoryFrames:
    """Frames stored as numbered PNG files, one directory per video."""

    def __init__(self, root, cache_size: int = 4096):
        self.root = Path(root)
        self._load = lru_cache(maxsize=cache_size)(self._read)

    def _read(self, video_id: str, frame_index: int) -> np.ndarray:
        path = self.root / video_id / f"{frame_index:06d}.png"
        if not path.exists():
            raise DataError(f"missing frame {path}")
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)

    def __call__(self, video_id: str, frame_index: int) -> np.ndarray:
        return self._load(video_id, frame_index).astype(np.float32) / 255.0


class MemoryFrames:
    """Frames held in memory as ``{video_id: uint8 array (T, H, W, 3)}``."""

    def __init__(self, frames: dict[str, np.ndarray]):
        self.frames = frames

    def __call__(self, video_id: str, frame_index: int) -> np.ndarray:
        try:
            return self.frames[video_id][frame_index].astype(np.float32) / 255.0
        except (KeyError, IndexError):
            raise DataError(f"no frame {frame_index} for video {video_id}") from None

    def save(self, root) -> None:
        root = Path(root)
        for vid, stack in self.frames.items():
            (root / vid).mkdir(parents=True, exist_ok=True)
            for t, frame in enumerate(stack):
                Image.fromarray(frame).save(root / vid / f"{t:06d}.png")


@dataclass
class Dataset:
    """Everything a training or evaluation command needs from a dataset directory."""

    header: DatasetHeader
    labels: dict[str, VideoLabel]
    region_sets: list[RegionSet]
    frames: object
    root: Optional[Path] = None

    def split(self, name: Optional[str]) -> list[RegionSet]:
        if name is None:
            return list(self.region_sets)
        if name not in self.header.splits:
            raise ConfigError(f"dataset has no split {name!r}")
        wanted = set(self.header.splits[name])
        return [rs for rs in self.region_sets if rs.video_id in wanted]

    def label_pairs(self) -> dict[str, tuple[int, int]]:
        return {vid: (lab.verb, lab.noun) for vid, lab in self.labels.items()}

    def label_of(self, video_id: str) -> VideoLabel:
        try:
            return self.labels[video_id]
        except KeyError:
            raise UnknownVideo(video_id) from None


def open_dataset(root, conf_threshold: float = 0.01, max_per_frame: int = 3) -> Dataset:
    root = Path(root)
    for name in (HEADER_FILE, LABELS_FILE, MANIFEST_FILE):
        if not (root / name).exists():
            raise DataError(f"dataset directory {root} lacks {name}")
    header = read_header(root / HEADER_FILE)
    labels = read_labels(root / LABELS_FILE)
    records = load_manifest(root / MANIFEST_FILE)
    sets = build_region_sets(records, {v: (l.verb, l.noun) for v, l in labels.items()},
                             conf_threshold, max_per_frame)
    return Dataset(header, labels, sets, DirectoryFrames(root / FRAMES_DIR), root)
