"""Detection manifests, region selection, jittered crops and per-video region sampling.

The manifest is a UTF-8, tab-separated text file with one detection per line
and a mandatory header line naming the columns::

    video_id  frame_index  x1  y1  x2  y2  confidence  kind

Boxes are in pixel coordinates of the source frame, ``kind`` is ``object`` or
``hand``. Detections are consumed as produced by the detector pipeline; no
non-maximum suppression happens here.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DegenerateBox, EmptyManifest, EmptyPool, MalformedRow

MANIFEST_SCHEMA = "sos-detections/v1"
MANIFEST_COLUMNS = ("video_id", "frame_index", "x1", "y1", "x2", "y2", "confidence", "kind")
KINDS = ("object", "hand")

DEFAULT_CONF_THRESHOLD = 0.01
DEFAULT_MAX_PER_FRAME = 3
DEFAULT_FRAMES_PER_VIDEO = 8
DEFAULT_CROP_SIZE = 112
MAX_JITTER = 1.25

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class DetectionRecord:
    video_id: str
    frame_index: int
    box: Box
    confidence: float
    kind: str = "object"

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2, got {self.box}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        if self.frame_index < 0:
            raise ValueError(f"frame_index must be non-negative, got {self.frame_index}")
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")

    @property
    def sort_key(self):
        """Descending confidence, then lexicographic box order."""
        return (-self.confidence, *self.box)


@dataclass
class RegionCrop:
    video_id: str
    frame_index: int
    source_box: Box
    jitter_factor: float
    crop: np.ndarray
    confidence: float = 1.0


@dataclass
class RegionSet:
    """A video's detections (the sampling pool) and its video-level labels."""

    video_id: str
    detections: list[DetectionRecord]
    verb_label: Optional[int] = None
    noun_label: Optional[int] = None
    regions: list[RegionCrop] = field(default_factory=list)

    @property
    def frames(self) -> list[int]:
        return sorted({d.frame_index for d in self.detections})


def video_rng(seed: int, video_id: str, *salt) -> np.random.Generator:
    """Generator seeded from ``hash(seed, video_id, *salt)``, stable across processes."""
    key = "\x1f".join([str(seed), video_id, *map(str, salt)]).encode()
    digest = hashlib.blake2b(key, digest_size=16).digest()
    return np.random.default_rng([int.from_bytes(digest[:8], "little"), int.from_bytes(digest[8:], "little")])


# ---------------------------------------------------------------------------
# manifest IO
# ---------------------------------------------------------------------------

def _parse_row(line: str, line_no: int) -> DetectionRecord:
    parts = line.rstrip("\r\n").split("\t")
    if len(parts) != len(MANIFEST_COLUMNS):
        raise MalformedRow(line_no, f"expected {len(MANIFEST_COLUMNS)} fields, got {len(parts)}")
    video_id, frame, x1, y1, x2, y2, conf, kind = parts
    try:
        return DetectionRecord(
            video_id=video_id,
            frame_index=int(frame),
            box=(float(x1), float(y1), float(x2), float(y2)),
            confidence=float(conf),
            kind=kind,
        )
    except ValueError as exc:
        raise MalformedRow(line_no, str(exc)) from None


def read_manifest(path, schema: str = MANIFEST_SCHEMA) -> list[DetectionRecord]:
    """All rows of a manifest, hands included."""
    if schema != MANIFEST_SCHEMA:
        raise ConfigError(f"unknown manifest schema {schema!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        if tuple(header) != MANIFEST_COLUMNS:
            raise MalformedRow(1, "missing or wrong header line")
        for line_no, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            records.append(_parse_row(line, line_no))
    return records


def load_manifest(path, schema: str = MANIFEST_SCHEMA) -> list[DetectionRecord]:
    """Object detections of a manifest, in file order. Hand rows are dropped."""
    records = [r for r in read_manifest(path, schema) if r.kind == "object"]
    if not records:
        raise EmptyManifest(f"no object rows in {path}")
    return records


def format_row(record: DetectionRecord) -> str:
    x1, y1, x2, y2 = record.box
    fields = [record.video_id, str(record.frame_index), repr(float(x1)), repr(float(y1)),
              repr(float(x2)), repr(float(y2)), repr(float(record.confidence)), record.kind]
    return "\t".join(fields)


def write_manifest(path, records: Iterable[DetectionRecord]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(MANIFEST_COLUMNS) + "\n")
        for record in records:
            fh.write(format_row(record) + "\n")
    return path


# ---------------------------------------------------------------------------
# selection and frame sampling
# ---------------------------------------------------------------------------

def select_regions(records: Sequence[DetectionRecord], conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                   max_per_frame: int = DEFAULT_MAX_PER_FRAME) -> list[DetectionRecord]:
    """Keep detections with confidence strictly above the threshold, at most
    ``max_per_frame`` per (video, frame) by descending confidence.

    Survivors are returned in input order.
    """
    if not 0.0 <= conf_threshold < 1.0:
        raise ConfigError(f"conf_threshold must lie in [0, 1), got {conf_threshold}")
    if max_per_frame < 1:
        raise ConfigError(f"max_per_frame must be >= 1, got {max_per_frame}")

    by_frame = defaultdict(list)
    for idx, rec in enumerate(records):
        if rec.confidence > conf_threshold:
            by_frame[(rec.video_id, rec.frame_index)].append(idx)
    keep = set()
    for indices in by_frame.values():
        indices.sort(key=lambda i: records[i].sort_key)
        keep.update(indices[:max_per_frame])
    return [rec for i, rec in enumerate(records) if i in keep]


def group_by_video(records: Iterable[DetectionRecord]) -> dict[str, list[DetectionRecord]]:
    groups: dict[str, list[DetectionRecord]] = {}
    for rec in records:
        groups.setdefault(rec.video_id, []).append(rec)
    return groups


def segment_frames(frames: Sequence[int], n_segments: int = DEFAULT_FRAMES_PER_VIDEO,
                   rng: Optional[np.random.Generator] = None) -> list[int]:
    """Temporal-segment sampling over the available frames.

    The ordered frame list is split into ``n_segments`` equal segments and one
    frame is taken per segment: the center one without ``rng``, a uniformly
    drawn one with it. Returns distinct frames in temporal order.
    """
    frames = sorted(set(frames))
    if len(frames) <= n_segments:
        return frames
    seg = len(frames) / n_segments
    picks = []
    for s in range(n_segments):
        offset = seg / 2 if rng is None else rng.uniform(0, seg)
        picks.append(frames[min(int(s * seg + offset), len(frames) - 1)])
    return sorted(set(picks))


# ---------------------------------------------------------------------------
# cropping
# ---------------------------------------------------------------------------

def sample_jitter(rng: np.random.Generator, max_factor: float = MAX_JITTER) -> float:
    return float(rng.uniform(1.0, max_factor))


def jitter_box(box: Box, jitter_factor: float, frame_shape, rng: np.random.Generator) -> Box:
    """Perturb center and scale of ``box`` by ``jitter_factor``; clamp to the frame."""
    if not 1.0 <= jitter_factor < MAX_JITTER:
        raise ConfigError(f"jitter_factor must lie in [1, {MAX_JITTER}), got {jitter_factor}")
    height, width = frame_shape[:2]
    x1, y1, x2, y2 = box
    w, h = x2 - x1, y2 - y1
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    if jitter_factor > 1.0:
        cx += rng.uniform(-1, 1) * (jitter_factor - 1) * w / 2
        cy += rng.uniform(-1, 1) * (jitter_factor - 1) * h / 2
        w, h = w * jitter_factor, h * jitter_factor
    nx1, nx2 = max(0.0, cx - w / 2), min(float(width), cx + w / 2)
    ny1, ny2 = max(0.0, cy - h / 2), min(float(height), cy + h / 2)
    if nx2 - nx1 <= 0 or ny2 - ny1 <= 0:
        raise DegenerateBox(f"box {box} has zero area inside a {width}x{height} frame")
    return (nx1, ny1, nx2, ny2)


def _bilinear_weights(start: float, stop: float, n_out: int, n_in: int) -> np.ndarray:
    """Rows of bilinear weights sampling [start, stop) at ``n_out`` pixel centers."""
    coords = start + (np.arange(n_out) + 0.5) * ((stop - start) / n_out) - 0.5
    lo = np.floor(coords)
    frac = coords - lo
    lo = lo.astype(int)
    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(weights, (rows, np.clip(lo, 0, n_in - 1)), 1 - frac)
    np.add.at(weights, (rows, np.clip(lo + 1, 0, n_in - 1)), frac)
    return weights


def resize_box(frame: np.ndarray, box: Box, out_h: int, out_w: Optional[int] = None) -> np.ndarray:
    """Bilinearly resample the continuous pixel rectangle ``box`` to ``out_h x out_w``.

    Output pixel centers are mapped to source coordinates with the half-pixel
    convention; samples falling outside the frame replicate the edge.
    """
    out_w = out_h if out_w is None else out_w
    x1, y1, x2, y2 = box
    wy = _bilinear_weights(y1, y2, out_h, frame.shape[0])
    wx = _bilinear_weights(x1, x2, out_w, frame.shape[1])
    h, w, c = frame.shape
    rows = (wy @ frame.reshape(h, w * c)).reshape(out_h, w, c)
    return np.matmul(wx, rows).astype(frame.dtype, copy=False)


def crop_with_jitter(frame: np.ndarray, box: Box, jitter_factor: float, crop_size: int,
                     rng: np.random.Generator, *, video_id: str = "", frame_index: int = 0,
                     confidence: float = 1.0) -> RegionCrop:
    """Jittered, clamped crop of ``box`` resized to ``crop_size x crop_size``."""
    if frame.ndim == 2:
        frame = frame[..., None]
    jittered = jitter_box(box, jitter_factor, frame.shape, rng)
    crop = resize_box(frame.astype(np.float32, copy=False), jittered, crop_size)
    return RegionCrop(video_id, frame_index, tuple(box), float(jitter_factor), crop, confidence)


# ---------------------------------------------------------------------------
# region-set sampling
# ---------------------------------------------------------------------------

def _region_key(item):
    box = getattr(item, "box", None) or item.source_box
    return (-item.confidence, item.frame_index, *box)


def sample_region_set(pool: Sequence, n: int, mode: str = "train_uniform",
                      rng: Optional[np.random.Generator] = None) -> list:
    """Draw ``n`` regions from a video's pool.

    ``train_uniform`` ignores confidence and samples without replacement; when
    the pool is smaller than ``n`` every region is used once and the remainder
    is filled with replacement. ``test_topk`` returns the ``n`` most confident
    regions (cycling if the pool is smaller) and never touches ``rng``.
    Items need ``confidence``, ``frame_index`` and ``box`` or ``source_box``.
    """
    pool = list(pool)
    if not pool:
        raise EmptyPool("cannot sample from an empty region pool")
    if n < 1:
        raise ConfigError(f"n must be >= 1, got {n}")
    if mode == "test_topk":
        ranked = sorted(pool, key=_region_key)
        return [ranked[i % len(ranked)] for i in range(n)]
    if mode != "train_uniform":
        raise ConfigError(f"unknown sampling mode {mode!r}")
    if rng is None:
        raise ConfigError("train_uniform sampling needs an rng")
    if len(pool) >= n:
        idx = rng.choice(len(pool), size=n, replace=False)
    else:
        extra = rng.choice(len(pool), size=n - len(pool), replace=True)
        idx = rng.permutation(np.concatenate([np.arange(len(pool)), extra]))
    return [pool[i] for i in idx]


def draw_regions(region_set: RegionSet, n: int, mode: str, rng: Optional[np.random.Generator],
                 frames_per_video: int = DEFAULT_FRAMES_PER_VIDEO) -> list[DetectionRecord]:
    """Segment-sample frames, then sample ``n`` detections among them."""
    frames = set(segment_frames(region_set.frames, frames_per_video, rng if mode == "train_uniform" else None))
    pool = [d for d in region_set.detections if d.frame_index in frames]
    return sample_region_set(pool, n, mode, rng)


def build_region_sets(records: Sequence[DetectionRecord], labels: Optional[dict] = None,
                      conf_threshold: float = DEFAULT_CONF_THRESHOLD,
                      max_per_frame: int = DEFAULT_MAX_PER_FRAME) -> list[RegionSet]:
    """Select regions and group them into per-video pools, ordered by video id.

    ``labels`` maps video id to a ``(verb, noun)`` pair. Videos left without
    any region after selection are dropped.
    """
    labels = labels or {}
    groups = group_by_video(select_regions(records, conf_threshold, max_per_frame))
    sets = []
    for video_id in sorted(groups):
        verb, noun = labels.get(video_id, (None, None))
        sets.append(RegionSet(video_id, groups[video_id], verb, noun))
    return sets

