"""Objects-in-contact fine-tuning with video-level labels.

Each region is classified independently by a verb head and a noun head on
top of the encoder features; a parameter-free mean over regions gives the
video logits. Training uses plain or logit-adjusted cross-entropy, applied
to the two heads separately with their own class priors.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.special import log_softmax

from .errors import (ConfigError, DivergenceDetected, EmptyRegionList, LabelOutOfRange, PriorMismatch)
from .fusion import pilot_split
from .pretrain.augment import augment_batch, get_recipe
from .pretrain.checkpoint import Checkpoint, canonical_json
from .pretrain.encoder import EncoderSpec, build_encoder, load_module_arrays, module_arrays
from .pretrain.engine import recalibrate_bn, region_crop, set_determinism, to_tensor
from .records import LogitRecord
from .region_ingest import RegionCrop, RegionSet, draw_regions, video_rng

log = logging.getLogger(__name__)

SPACES = ("verb", "noun")


# ---------------------------------------------------------------------------
# priors and losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassPrior:
    space: str
    counts: tuple
    pi: np.ndarray = field(compare=False, repr=False)

    @classmethod
    def from_counts(cls, counts, space: str = "noun") -> "ClassPrior":
        counts = np.asarray(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0 or np.any(counts < 0):
            raise ConfigError("class counts must be a non-empty vector of non-negative integers")
        # add-one on empty classes keeps log(pi) finite
        smoothed = np.where(counts == 0, 1, counts).astype(np.float64)
        return cls(space, tuple(int(c) for c in counts), smoothed / smoothed.sum())

    @classmethod
    def from_labels(cls, labels: Sequence[int], n_classes: int, space: str = "noun") -> "ClassPrior":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise LabelOutOfRange(f"{space} labels must lie in [0, {n_classes})")
        return cls.from_counts(np.bincount(labels, minlength=n_classes), space)

    @classmethod
    def uniform(cls, n_classes: int, space: str = "noun") -> "ClassPrior":
        return cls.from_counts(np.ones(n_classes, dtype=np.int64), space)

    @property
    def log_pi(self) -> np.ndarray:
        return np.log(self.pi)


def _check_label(logits: np.ndarray, label: int) -> None:
    if not 0 <= int(label) < logits.shape[-1]:
        raise LabelOutOfRange(f"label {label} outside [0, {logits.shape[-1]})")


def ce_loss(logits, label: int) -> float:
    """-log softmax(logits)[label] with max subtraction."""
    logits = np.asarray(logits, dtype=np.float64)
    _check_label(logits, label)
    return float(-log_softmax(logits)[int(label)])


def logit_adjusted_ce(logits, label: int, prior: ClassPrior, tau_la: float = 1.0) -> float:
    """Cross-entropy on logits shifted by ``tau_la * log(pi)``."""
    logits = np.asarray(logits, dtype=np.float64)
    if prior.pi.shape != logits.shape:
        raise PriorMismatch(f"prior over {prior.pi.size} classes, logits over {logits.size}")
    if tau_la < 0:
        raise ConfigError("tau_la must be >= 0")
    return ce_loss(logits + tau_la * prior.log_pi, label)


def batch_loss(logits: torch.Tensor, labels: torch.Tensor, prior: Optional[ClassPrior] = None,
               tau_la: float = 1.0) -> torch.Tensor:
    """Mean (optionally logit-adjusted) cross-entropy over a batch of video logits."""
    if prior is not None and tau_la > 0:
        if prior.pi.size != logits.shape[1]:
            raise PriorMismatch(f"prior over {prior.pi.size} classes, logits over {logits.shape[1]}")
        logits = logits + tau_la * torch.from_numpy(prior.log_pi).to(logits.dtype)
    return F.cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class OICHead(nn.Module):
    """Independent verb and noun linear classifiers applied per region."""

    def __init__(self, feat_dim: int, n_verbs: int, n_nouns: int):
        super().__init__()
        self.verb = nn.Linear(feat_dim, n_verbs)
        self.noun = nn.Linear(feat_dim, n_nouns)

    def forward(self, feats):
        return self.verb(feats), self.noun(feats)


class OICModel(nn.Module):
    def __init__(self, spec: EncoderSpec, n_verbs: int, n_nouns: int):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec)
        self.head = OICHead(spec.feat_dim, n_verbs, n_nouns)

    def forward(self, x: torch.Tensor, n_regions: int):
        """``x`` holds ``B * n_regions`` crops grouped by video; returns mean-pooled video logits."""
        verb, noun = self.head(self.encoder(x))
        return (verb.reshape(-1, n_regions, verb.shape[1]).mean(dim=1),
                noun.reshape(-1, n_regions, noun.shape[1]).mean(dim=1))


def _fsum_rows(rows: np.ndarray) -> np.ndarray:
    # exact summation, so the mean is independent of region order
    return np.array([math.fsum(col) for col in rows.T]) / rows.shape[0]


@torch.no_grad()
def video_logits(regions: Sequence[RegionCrop], encoder: nn.Module, head: OICHead,
                 model_tag: str = "oic") -> LogitRecord:
    """Mean over regions of the per-region verb and noun logits."""
    regions = list(regions)
    if not regions:
        raise EmptyRegionList("a video needs at least one region")
    was = encoder.training, head.training
    encoder.eval()
    head.eval()
    x = to_tensor(np.stack([r.crop for r in regions]).astype(np.float32))
    verb, noun = head(encoder(x))
    encoder.train(was[0])
    head.train(was[1])
    return LogitRecord(regions[0].video_id, _fsum_rows(verb.double().numpy()), _fsum_rows(noun.double().numpy()),
                       model_tag)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class FinetuneConfig:
    epochs: int = 30
    base_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    milestones: tuple = (20,)
    gamma: float = 0.1
    lt_loss: bool = False
    tau_la: float = 1.0
    verb_weight: float = 1.0
    noun_weight: float = 1.0
    n_regions: int = 4
    n_test_regions: int = 8
    crop_size: int = 64
    max_jitter: float = 1.25
    frames_per_video: int = 8
    augmentation: str = "flip"
    freeze_encoder: bool = False
    pilot_fraction: float = 0.3
    train_split: str = "train"
    seed: int = 0
    threads: int = 1
    model_tag: str = "oic"
    # encoder used when no pre-training checkpoint is given
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.n_regions < 1 or self.n_test_regions < 1:
            raise ConfigError("epochs, batch_size and region counts must be >= 1")
        if self.base_lr <= 0:
            raise ConfigError("base_lr must be positive")
        if self.tau_la < 0:
            raise ConfigError("tau_la must be >= 0")
        if not 0 <= self.pilot_fraction < 1:
            raise ConfigError("pilot_fraction must lie in [0, 1)")
        get_recipe(self.augmentation)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        d["encoder"]["widths"] = list(self.encoder.widths)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "FinetuneConfig":
        obj = dict(obj)
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown finetune config keys: {sorted(unknown)}")
        enc = obj.pop("encoder", {}) or {}
        if isinstance(enc, dict):
            enc = dict(enc)
            if "widths" in enc:
                enc["widths"] = tuple(enc["widths"])
            enc = EncoderSpec(**enc)
        if "milestones" in obj:
            obj["milestones"] = tuple(obj["milestones"])
        return cls(encoder=enc, **obj)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()[:16]


def step_lr(epoch: int, base_lr: float, milestones: Sequence[int] = (20,), gamma: float = 0.1) -> float:
    """Learning rate for 1-based ``epoch``: decayed by ``gamma`` after each milestone epoch."""
    return base_lr * gamma ** sum(epoch > m for m in milestones)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    model: OICModel
    checkpoint: Checkpoint
    records: dict[str, list[LogitRecord]]
    history: list[dict]
    pilot_ids: list[str]


def _encoder_spec(checkpoint: Optional[Checkpoint], config: FinetuneConfig) -> EncoderSpec:
    if checkpoint is None:
        return config.encoder
    enc = dict(checkpoint.metadata.get("config", {}).get("encoder", {}))
    if not enc:
        return config.encoder
    enc["widths"] = tuple(enc["widths"])
    enc["init"] = "random"
    return EncoderSpec(**enc)


def build_model(checkpoint: Optional[Checkpoint], config: FinetuneConfig, n_verbs: int, n_nouns: int,
                load_head: bool = False) -> OICModel:
    """Fresh OIC model; the encoder comes from ``checkpoint`` when given.

    Heads are loaded only on request, so a fine-tuned checkpoint can serve as
    a supervised initialization for a different label space.
    """
    torch.manual_seed(config.seed)
    model = OICModel(_encoder_spec(checkpoint, config), n_verbs, n_nouns)
    if checkpoint is not None:
        load_module_arrays(model.encoder, checkpoint.arrays, "encoder")
        if load_head:
            if checkpoint.metadata.get("kind") != "finetune":
                raise ConfigError("only fine-tuned checkpoints carry classifier heads")
            load_module_arrays(model.head, checkpoint.arrays, "head")
    return model


def training_views(videos: Sequence[RegionSet], frames, config: FinetuneConfig, epoch: int) -> np.ndarray:
    recipe = get_recipe(config.augmentation)
    crops, rngs = [], []
    for video in videos:
        rng = video_rng(config.seed, video.video_id, "finetune", epoch)
        for det in draw_regions(video, config.n_regions, "train_uniform", rng, config.frames_per_video):
            crops.append(region_crop(frames, det, config.crop_size, rng, config.max_jitter))
            rngs.append(rng)
    return augment_batch(crops, recipe, rngs)


def test_regions(video: RegionSet, frames, config: FinetuneConfig) -> list[RegionCrop]:
    dets = draw_regions(video, config.n_test_regions, "test_topk", None, config.frames_per_video)
    return [RegionCrop(d.video_id, d.frame_index, d.box, 1.0, region_crop(frames, d, config.crop_size, None),
                       d.confidence) for d in dets]


def predict(model: OICModel, videos: Sequence[RegionSet], frames, config: FinetuneConfig) -> list[LogitRecord]:
    return [video_logits(test_regions(v, frames, config), model.encoder, model.head, config.model_tag)
            for v in videos]


def finetune_checkpoint(model: OICModel, config: FinetuneConfig, epoch: int, history: list[dict],
                        pilot_ids: Sequence[str], source: Optional[Checkpoint]) -> Checkpoint:
    arrays = {**module_arrays(model.encoder, "encoder"), **module_arrays(model.head, "head")}
    metadata = {
        "kind": "finetune",
        "config": {**config.to_dict(), "encoder": {**asdict(model.spec), "widths": list(model.spec.widths)}},
        "config_hash": config.hash(),
        "seed": config.seed,
        "epoch": epoch,
        "n_verbs": model.head.verb.out_features,
        "n_nouns": model.head.noun.out_features,
        "pilot_ids": list(pilot_ids),
        "source_config_hash": source.metadata.get("config_hash") if source is not None else None,
        "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in history],
    }
    return Checkpoint(arrays, metadata)


def finetune(dataset, checkpoint: Optional[Checkpoint], config: FinetuneConfig, log_path=None) -> FinetuneResult:
    """Fine-tune encoder and heads on the training split minus a held-out pilot set.

    ``dataset`` is a :class:`~sos_oic.dataset.Dataset`. Returns the model, a
    checkpoint and logit records for every split declared in the dataset
    header, plus ``pilot``, the held-out part of the training split.
    """
    config.validate()
    set_determinism(config.seed, config.threads)
    header = dataset.header
    train_all = dataset.split(config.train_split)
    if not train_all:
        raise ConfigError(f"split {config.train_split!r} is empty")
    pilot_ids: list[str] = []
    if config.pilot_fraction > 0:
        strata = [(v.verb_label, v.noun_label) for v in train_all]
        pilot_ids, _ = pilot_split([v.video_id for v in train_all], strata, config.pilot_fraction, config.seed)
    pilot_set = set(pilot_ids)
    train_videos = [v for v in train_all if v.video_id not in pilot_set]
    for v in train_videos:
        if not (0 <= v.verb_label < header.n_verbs and 0 <= v.noun_label < header.n_nouns):
            raise LabelOutOfRange(f"labels of {v.video_id} fall outside the header's label spaces")

    priors = {
        "verb": ClassPrior.from_labels([v.verb_label for v in train_videos], header.n_verbs, "verb"),
        "noun": ClassPrior.from_labels([v.noun_label for v in train_videos], header.n_nouns, "noun"),
    }
    model = build_model(checkpoint, config, header.n_verbs, header.n_nouns)
    model.train()
    if config.freeze_encoder:
        # frozen features need BatchNorm statistics that match this data
        recalibrate_bn(model.encoder, [to_tensor(training_views(train_videos[i:i + config.batch_size], dataset.frames,
                                                                  config, 0))
                                       for i in range(0, len(train_videos), config.batch_size)])
        for p in model.encoder.parameters():
            p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.SGD(params, lr=config.base_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)
    order_rng = np.random.default_rng([config.seed, 0xF1])
    history: list[dict] = []
    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            lr = step_lr(epoch, config.base_lr, config.milestones, config.gamma)
            for group in optimizer.param_groups:
                group["lr"] = lr
            if config.freeze_encoder:
                model.encoder.eval()
            order = order_rng.permutation(len(train_videos))
            losses, correct = [], {"verb": 0, "noun": 0}
            for b in range(0, len(order), config.batch_size):
                batch = [train_videos[i] for i in order[b:b + config.batch_size]]
                x = to_tensor(training_views(batch, dataset.frames, config, epoch))
                y = {"verb": torch.tensor([v.verb_label for v in batch]),
                     "noun": torch.tensor([v.noun_label for v in batch])}
                logits = dict(zip(SPACES, model(x, config.n_regions)))
                loss = sum(w * batch_loss(logits[s], y[s], priors[s] if config.lt_loss else None, config.tau_la)
                           for s, w in (("verb", config.verb_weight), ("noun", config.noun_weight)))
                if not torch.isfinite(loss):
                    raise DivergenceDetected(f"non-finite fine-tuning loss at epoch {epoch}")
                optimizer.zero_grad(set_to_none=True)
                loss.backward()
                optimizer.step()
                losses.append((loss.item(), len(batch)))
                for s in SPACES:
                    correct[s] += int((logits[s].argmax(dim=1) == y[s]).sum())
            n = len(train_videos)
            record = {"epoch": epoch, "loss": sum(l * k for l, k in losses) / n, "lr": lr,
                      "train_verb_acc": correct["verb"] / n, "train_noun_acc": correct["noun"] / n,
                      "wall_time": time.perf_counter() - start}
            history.append(record)
            log.info("finetune epoch %d loss %.4f lr %.4g", epoch, record["loss"], lr)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()

    records = {name: predict(model, dataset.split(name), dataset.frames, config) for name in header.splits}
    if pilot_ids:
        records["pilot"] = [r for r in records[config.train_split] if r.video_id in pilot_set]
    ckpt = finetune_checkpoint(model, config, config.epochs, history, pilot_ids, checkpoint)
    return FinetuneResult(model, ckpt, records, history, list(pilot_ids))
