"""Late fusion of logit files, pilot-based weight selection and evaluation metrics.

Fusion is a per-space weighted sum of raw logits. Weights are chosen on a
pilot set carved from training videos. Metrics cover top-k accuracy for
verb, noun and action (the verb-noun pair), class-balanced accuracy and
subset reports for tail classes and unseen participants.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.special import log_softmax

from .errors import ConfigError, DimensionMismatch, EmptyPilot, UnknownVideo, VideoMismatch
from .records import LogitRecord

SPACES = ("verb", "noun")
ALL_SPACES = ("verb", "noun", "action")
SUBSETS = ("overall", "tail", "unseen")


# ---------------------------------------------------------------------------
# weights and fusion
# ---------------------------------------------------------------------------

class SpaceWeights(NamedTuple):
    alpha_oic: float
    alpha_base: float


def _check_pair(pair) -> SpaceWeights:
    pair = SpaceWeights(float(pair[0]), float(pair[1]))
    if pair.alpha_oic < 0 or pair.alpha_base < 0:
        raise ConfigError(f"fusion weights must be non-negative, got {tuple(pair)}")
    if pair.alpha_oic == 0 and pair.alpha_base == 0:
        raise ConfigError("fusion weights of a space cannot both be zero")
    return pair


@dataclass(frozen=True)
class FusionWeights:
    """Independent (alpha_oic, alpha_base) pairs for the verb and noun spaces."""

    verb: SpaceWeights
    noun: SpaceWeights

    def __post_init__(self):
        object.__setattr__(self, "verb", _check_pair(self.verb))
        object.__setattr__(self, "noun", _check_pair(self.noun))

    @classmethod
    def same(cls, alpha_oic: float, alpha_base: float) -> "FusionWeights":
        return cls((alpha_oic, alpha_base), (alpha_oic, alpha_base))

    def for_space(self, space: str) -> SpaceWeights:
        return self.verb if space == "verb" else self.noun

    def to_dict(self) -> dict:
        return {s: {"alpha_oic": w.alpha_oic, "alpha_base": w.alpha_base}
                for s, w in (("verb", self.verb), ("noun", self.noun))}

    @classmethod
    def from_dict(cls, obj: dict) -> "FusionWeights":
        return cls(*((obj[s]["alpha_oic"], obj[s]["alpha_base"]) for s in SPACES))


def _as_weights(w) -> FusionWeights:
    return w if isinstance(w, FusionWeights) else FusionWeights.same(*w)


def fuse(oic: LogitRecord, base: LogitRecord, w, model_tag: str = "fused") -> LogitRecord:
    """``alpha_oic * oic + alpha_base * base`` per space, on raw logits."""
    if oic.video_id != base.video_id:
        raise VideoMismatch(f"cannot fuse {oic.video_id!r} with {base.video_id!r}")
    w = _as_weights(w)
    out = {}
    for space in SPACES:
        a, b = oic.logits(space), base.logits(space)
        if a.shape != b.shape:
            raise DimensionMismatch(f"{space} logits of {oic.video_id}: {a.shape} vs {b.shape}")
        sw = w.for_space(space)
        out[space] = sw.alpha_oic * a + sw.alpha_base * b
    return LogitRecord(oic.video_id, out["verb"], out["noun"], model_tag)


def pair_records(oic: Sequence[LogitRecord], base: Sequence[LogitRecord]) -> list[tuple[LogitRecord, LogitRecord]]:
    """Match records by video id, in sorted id order; ids missing from either side are an error."""
    a = {r.video_id: r for r in oic}
    b = {r.video_id: r for r in base}
    missing = sorted(set(a) ^ set(b))
    if missing:
        raise VideoMismatch(f"logit files cover different videos, e.g. {missing[:3]}")
    return [(a[v], b[v]) for v in sorted(a)]


def fuse_all(oic: Sequence[LogitRecord], base: Sequence[LogitRecord], w, model_tag: str = "fused") -> list[LogitRecord]:
    return [fuse(x, y, w, model_tag) for x, y in pair_records(oic, base)]


def default_grid(step: float = 0.1) -> list[tuple[float, float]]:
    n = int(round(1 / step))
    values = [round(i * step, 10) for i in range(n + 1)]
    return [(a, b) for a in values for b in values if a or b]


def parse_grid(text: str) -> list[tuple[float, float]]:
    """``"a:b,a:b,..."`` pairs, or ``"step=0.25"`` for a regular grid over [0, 1]^2."""
    text = text.strip()
    if text.startswith("step="):
        return default_grid(float(text[5:]))
    try:
        grid = [tuple(float(x) for x in item.split(":")) for item in text.split(",") if item.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse fusion grid {text!r}") from None
    if not grid or any(len(p) != 2 for p in grid):
        raise ConfigError(f"fusion grid must be 'a:b' pairs, got {text!r}")
    return grid


# ---------------------------------------------------------------------------
# pilot split and weight selection
# ---------------------------------------------------------------------------

def pilot_split(video_ids: Sequence[str], strata: Sequence, fraction: float, seed: int = 0):
    """Hold out exactly ``round(fraction * n)`` videos, stratified by ``strata``.

    Each stratum gets ``floor(fraction * size)`` pilot videos; the leftover
    slots go to the strata with the largest fractional remainders. Returns
    ``(pilot_ids, rest_ids)``, both sorted.
    """
    if not 0 < fraction < 1:
        raise ConfigError(f"pilot fraction must lie in (0, 1), got {fraction}")
    if len(video_ids) != len(strata):
        raise DimensionMismatch("one stratum per video required")
    order = sorted(range(len(video_ids)), key=lambda i: video_ids[i])
    n_pilot = int(np.floor(fraction * len(order) + 0.5))
    if n_pilot == 0:
        raise EmptyPilot(f"pilot fraction {fraction} of {len(order)} videos selects none")
    groups: dict = {}
    for i in order:
        groups.setdefault(strata[i], []).append(video_ids[i])
    keys = sorted(groups, key=repr)
    quota = {k: fraction * len(groups[k]) for k in keys}
    take = {k: int(np.floor(quota[k])) for k in keys}
    leftover = n_pilot - sum(take.values())
    by_remainder = sorted(keys, key=lambda k: (-(quota[k] - take[k]), keys.index(k)))
    for k in by_remainder[:leftover]:
        take[k] += 1
    rng = np.random.default_rng([seed, 0x9170])
    pilot = []
    for k in keys:
        members = groups[k]
        pilot += [members[j] for j in rng.permutation(len(members))[:take[k]]]
    chosen = set(pilot)
    return sorted(pilot), sorted(v for v in video_ids if v not in chosen)


def _label(labels: Mapping, video_id: str, space: str) -> int:
    try:
        lab = labels[video_id]
    except KeyError:
        raise UnknownVideo(video_id) from None
    if hasattr(lab, "verb"):
        return int(lab.verb if space == "verb" else lab.noun)
    return int(lab[0] if space == "verb" else lab[1])


@dataclass
class Selection:
    weights: FusionWeights
    pilot_ids: list[str]
    pilot_accuracy: dict = field(default_factory=dict)


def select_weights(oic: Sequence[LogitRecord], base: Sequence[LogitRecord], labels: Mapping,
                   pilot_fraction: float = 0.3, grid: Optional[Sequence] = None, seed: int = 0) -> Selection:
    """Pick per-space fusion weights maximizing pilot top-1 accuracy.

    The pilot is ``pilot_split`` over the paired videos, stratified by the
    (verb, noun) label; ties go to the smaller alpha_oic, then grid order.
    """
    grid = [_check_pair(p) for p in (default_grid() if grid is None else grid)]
    if not grid:
        raise ConfigError("fusion grid is empty")
    pairs = pair_records(oic, base)
    ids = [a.video_id for a, _ in pairs]
    strata = [(_label(labels, v, "verb"), _label(labels, v, "noun")) for v in ids]
    pilot_ids, _ = pilot_split(ids, strata, pilot_fraction, seed)
    wanted = set(pilot_ids)
    pilot = [(a, b) for a, b in pairs if a.video_id in wanted]
    chosen, table = {}, {}
    for space in SPACES:
        A = np.stack([a.logits(space) for a, _ in pilot])
        B = np.stack([b.logits(space) for _, b in pilot])
        y = np.array([_label(labels, a.video_id, space) for a, _ in pilot])
        scored = []
        for idx, p in enumerate(grid):
            acc = float(np.mean(np.argmax(p.alpha_oic * A + p.alpha_base * B, axis=1) == y))
            scored.append((-acc, p.alpha_oic, idx))
        best = min(scored)
        chosen[space] = grid[best[2]]
        table[space] = -best[0]
    return Selection(FusionWeights(chosen["verb"], chosen["noun"]), pilot_ids, table)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _scores(records: Sequence[LogitRecord], space: str) -> np.ndarray:
    if space == "action":
        v = log_softmax(np.stack([r.verb_logits for r in records]), axis=1)
        n = log_softmax(np.stack([r.noun_logits for r in records]), axis=1)
        return (v[:, :, None] + n[:, None, :]).reshape(len(records), -1)
    return np.stack([r.logits(space) for r in records])


def _targets(records: Sequence[LogitRecord], labels: Mapping, space: str) -> np.ndarray:
    if space == "action":
        n_nouns = records[0].noun_logits.size
        return np.array([_label(labels, r.video_id, "verb") * n_nouns + _label(labels, r.video_id, "noun")
                         for r in records])
    return np.array([_label(labels, r.video_id, space) for r in records])


def _ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """0-based rank of each target; equal scores rank by class index."""
    true = scores[np.arange(len(targets)), targets][:, None]
    idx = np.arange(scores.shape[1])[None, :]
    return np.sum((scores > true) | ((scores == true) & (idx < targets[:, None])), axis=1)


def topk_accuracy(records: Sequence[LogitRecord], labels: Mapping, k: int = 1, space: str = "verb") -> float:
    if k < 1:
        raise ConfigError("k must be >= 1")
    records = list(records)
    if not records:
        return float("nan")
    return float(np.mean(_ranks(_scores(records, space), _targets(records, labels, space)) < k))


def predictions(records: Sequence[LogitRecord], space: str) -> np.ndarray:
    """Top-1 class per record (action as flattened verb * n_nouns + noun); ties to the lowest index."""
    return np.argmax(_scores(list(records), space), axis=1)


def per_class_accuracy(records: Sequence[LogitRecord], labels: Mapping, space: str) -> dict[int, tuple[int, float]]:
    records = list(records)
    if not records:
        return {}
    y = _targets(records, labels, space)
    hit = predictions(records, space) == y
    return {int(c): (int(np.sum(y == c)), float(np.mean(hit[y == c]))) for c in np.unique(y)}


def class_balanced_accuracy(records: Sequence[LogitRecord], labels: Mapping, space: str = "verb") -> float:
    """Each video weighted by 1 / count(its label), normalized by the number of labels present."""
    records = list(records)
    if not records:
        return float("nan")
    y = _targets(records, labels, space)
    hit = (predictions(records, space) == y).astype(np.float64)
    _, inverse, counts = np.unique(y, return_inverse=True, return_counts=True)
    # mean of per-class accuracies; equals sum(hit / count) / n_classes but is exact for a perfect predictor
    per_class = np.bincount(inverse, weights=hit) / counts
    return float(np.mean(per_class))


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    n_videos: dict[str, int]
    topk: dict          # subset -> space -> {"top1", "top5"} (None when the subset is empty)
    class_balanced: dict    # subset -> space -> value or None
    per_class: dict         # space -> {class: [count, accuracy]}
    model_tag: str = ""

    def to_dict(self) -> dict:
        return {"model_tag": self.model_tag, "n_videos": self.n_videos, "topk": self.topk,
                "class_balanced": self.class_balanced,
                "per_class": {s: {str(c): v for c, v in t.items()} for s, t in self.per_class.items()}}

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def table(self) -> str:
        def fmt(x):
            return "  n/a" if x is None else f"{100 * x:5.1f}"

        head = f"{'subset':<8} {'n':>5} | " + " ".join(f"{s + '@1':>8} {s + '@5':>8}" for s in ALL_SPACES) \
            + " | " + " ".join(f"{'cb-' + s:>9}" for s in ALL_SPACES)
        lines = [head, "-" * len(head)]
        for sub in SUBSETS:
            row = f"{sub:<8} {self.n_videos[sub]:>5} | "
            row += " ".join(f"{fmt(self.topk[sub][s] and self.topk[sub][s]['top1']):>8} "
                            f"{fmt(self.topk[sub][s] and self.topk[sub][s]['top5']):>8}" for s in ALL_SPACES)
            row += " | " + " ".join(f"{fmt(self.class_balanced[sub][s]):>9}" for s in ALL_SPACES)
            lines.append(row)
        return "\n".join(lines)


def _subset_members(records, labels, space, subset, tail, unseen):
    if subset == "overall":
        return list(records)
    if subset == "unseen":
        out = []
        for r in records:
            if r.video_id not in labels:
                raise UnknownVideo(r.video_id)
            if getattr(labels[r.video_id], "participant", None) in unseen:
                out.append(r)
        return out
    if space == "action":
        return [r for r in records if _label(labels, r.video_id, "verb") in tail["verb"]
                or _label(labels, r.video_id, "noun") in tail["noun"]]
    return [r for r in records if _label(labels, r.video_id, space) in tail[space]]


def evaluate(records: Sequence[LogitRecord], labels: Mapping, tail_verbs=(), tail_nouns=(),
             unseen_participants=(), model_tag: str = "") -> EvalReport:
    """Full report; tail and unseen definitions are inputs, never inferred.

    A video counts as a tail action when its verb or its noun is a tail class.
    """
    records = list(records)
    for r in records:
        if r.video_id not in labels:
            raise UnknownVideo(r.video_id)
    tail = {"verb": {int(c) for c in tail_verbs}, "noun": {int(c) for c in tail_nouns}}
    unseen = set(unseen_participants)
    topk, cb, n_videos = {}, {}, {}
    for sub in SUBSETS:
        topk[sub], cb[sub] = {}, {}
        for space in ALL_SPACES:
            members = _subset_members(records, labels, space, sub, tail, unseen)
            if sub != "tail" or space == "action":
                n_videos.setdefault(sub, len(members))
            if not members:
                topk[sub][space] = cb[sub][space] = None
                continue
            topk[sub][space] = {"top1": topk_accuracy(members, labels, 1, space),
                                "top5": topk_accuracy(members, labels, 5, space)}
            cb[sub][space] = class_balanced_accuracy(members, labels, space)
    per_class = {s: per_class_accuracy(records, labels, s) for s in SPACES}
    return EvalReport(n_videos, topk, cb, per_class, model_tag)


def evaluate_dataset(records: Sequence[LogitRecord], dataset_header, labels: Mapping, model_tag: str = "") -> EvalReport:
    return evaluate(records, labels, dataset_header.tail_verbs, dataset_header.tail_nouns,
                    dataset_header.unseen_participants, model_tag)
