"""On-domain self-supervised training over per-video region sets.

``swav_s`` draws N regions per video and treats them as mutual views.
``swav`` is the per-region baseline: N // 2 regions per video, each seen
through two independent augmentations, so both objectives see the same
number of embeddings per step.
"""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .. import ssl_core
from ..errors import ConfigError, DivergenceDetected
from ..synth import oracle_linear_probe
from ..region_ingest import RegionSet, crop_with_jitter, draw_regions, sample_jitter, video_rng
from .augment import augment_batch, get_recipe
from .checkpoint import Checkpoint, canonical_json, load_checkpoint
from .encoder import EncoderSpec, SSLModel, load_module_arrays, module_arrays

log = logging.getLogger(__name__)

OBJECTIVES = ("swav", "swav_s")


class TrainingProgressWarning(UserWarning):
    pass


@dataclass
class PretrainConfig:
    objective: str = "swav_s"
    n_regions_per_set: int = 4
    batch_sets: int = 32
    epochs: int = 100
    base_lr: float = 0.05
    final_lr_ratio: float = 0.001
    warmup_epochs: int = 0
    momentum: float = 0.9
    weight_decay: float = 1e-6
    seed: int = 0
    augmentation: str = "flip"
    tau: float = ssl_core.DEFAULT_TAU
    sinkhorn_epsilon: float = ssl_core.DEFAULT_EPSILON
    sinkhorn_iters: int = ssl_core.DEFAULT_SINKHORN_ITERS
    n_prototypes: int = 64
    freeze_prototypes_iters: int = 0
    crop_size: int = 64
    max_jitter: float = 1.25
    frames_per_video: int = 8
    threads: int = 1
    smoothing_window: int = 10
    encoder: EncoderSpec = field(default_factory=EncoderSpec)

    def validate(self) -> None:
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        if self.n_regions_per_set < 2:
            raise ConfigError("n_regions_per_set must be >= 2")
        if self.objective == "swav" and self.n_regions_per_set % 2:
            raise ConfigError("swav pairs views, so n_regions_per_set must be even")
        if self.batch_sets < 1 or self.epochs < 1:
            raise ConfigError("batch_sets and epochs must be >= 1")
        if self.base_lr <= 0 or self.tau <= 0 or self.sinkhorn_epsilon <= 0:
            raise ConfigError("base_lr, tau and sinkhorn_epsilon must be positive")
        get_recipe(self.augmentation)

    @property
    def embeddings_per_batch(self) -> int:
        return self.batch_sets * self.n_regions_per_set

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["widths"] = list(self.encoder.widths)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "PretrainConfig":
        obj = dict(obj)
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown pretrain config keys: {sorted(unknown)}")
        enc = obj.pop("encoder", {}) or {}
        if isinstance(enc, dict):
            enc = dict(enc)
            if "widths" in enc:
                enc["widths"] = tuple(enc["widths"])
            enc = EncoderSpec(**enc)
        return cls(encoder=enc, **obj)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict())).hexdigest()[:16]


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    model: SSLModel
    history: list[dict]


# ---------------------------------------------------------------------------
# views and batches
# ---------------------------------------------------------------------------

def region_crop(frames, det, crop_size: int, rng: Optional[np.random.Generator], max_jitter: float = 1.25):
    """Crop one detection; jittered when ``rng`` is given, exact box otherwise."""
    frame = frames(det.video_id, det.frame_index)
    factor = sample_jitter(rng, max_jitter) if rng is not None else 1.0
    return crop_with_jitter(frame, det.box, factor, crop_size, rng if rng is not None else np.random.default_rng(0),
                            video_id=det.video_id, frame_index=det.frame_index, confidence=det.confidence).crop


def assemble_views(videos: Sequence[RegionSet], frames, config: PretrainConfig, epoch: int = 0):
    """Augmented views for one batch, grouped set by set.

    Returns ``(views [B, H, W, 3] float32, provenance, n_per_set)``. Random
    draws come from per-video generators keyed on (seed, video id, epoch).
    """
    recipe = get_recipe(config.augmentation)
    N = config.n_regions_per_set
    crops, rngs, provenance = [], [], []
    for video in videos:
        rng = video_rng(config.seed, video.video_id, "pretrain", epoch)
        per_region = N if config.objective == "swav_s" else N // 2
        views_per_region = 1 if config.objective == "swav_s" else 2
        dets = draw_regions(video, per_region, "train_uniform", rng, config.frames_per_video)
        for i, det in enumerate(dets):
            crop = region_crop(frames, det, config.crop_size, rng, config.max_jitter)
            for _ in range(views_per_region):
                crops.append(crop)
                rngs.append(rng)
                provenance.append((video.video_id, det.frame_index, i))
    n_per_set = N if config.objective == "swav_s" else 2
    return augment_batch(crops, recipe, rngs), provenance, n_per_set


def to_tensor(views: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(views)).permute(0, 3, 1, 2).contiguous()


def build_batch(videos: Sequence[RegionSet], config: PretrainConfig, frames, model: SSLModel,
                epoch: int = 0) -> ssl_core.SetBatch:
    """Sample, augment, encode and normalize one batch of sets (no gradient)."""
    views, provenance, n_per_set = assemble_views(videos, frames, config, epoch)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = model.embed(to_tensor(views)).double().numpy()
    model.train(was_training)
    return ssl_core.SetBatch(ssl_core.normalize_rows(z), n_per_set, provenance)


# ---------------------------------------------------------------------------
# schedule and steps
# ---------------------------------------------------------------------------

def cosine_lr(step: int, total_steps: int, base_lr: float, final_lr: float, warmup_steps: int = 0) -> float:
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return final_lr + 0.5 * (base_lr - final_lr) * (1 + math.cos(math.pi * progress))


def set_determinism(seed: int, threads: int = 1) -> None:
    torch.manual_seed(seed)
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True, warn_only=True)


def swav_step(model: SSLModel, views: np.ndarray, n_per_set: int, config: PretrainConfig,
              update_prototypes: bool = True) -> float:
    """Forward, set loss with Sinkhorn codes, and backward; returns the loss.

    Gradients w.r.t. the embeddings come from the analytic set-loss
    derivative and are pushed through the network with ``backward``.
    """
    z = model.embed(to_tensor(views))
    Z = z.detach().double().numpy()
    C = model.prototypes.detach().double().numpy()
    codes = ssl_core.sinkhorn_codes(Z @ C.T, config.sinkhorn_epsilon, config.sinkhorn_iters, config.tau)
    batch = ssl_core.SetBatch(Z, n_per_set)
    loss, grad_z, grad_c = ssl_core.swav_s_loss_and_grad(batch, C, config.tau, codes)
    if not math.isfinite(loss):
        raise DivergenceDetected(f"non-finite loss {loss}")
    z.backward(torch.from_numpy(grad_z).to(z.dtype))
    grad_c = torch.from_numpy(grad_c).to(model.prototypes.dtype)
    model.prototypes.grad = grad_c if update_prototypes else torch.zeros_like(grad_c)
    return loss


def probe_loss(model: SSLModel, views: np.ndarray, n_per_set: int, config: PretrainConfig) -> float:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        Z = model.embed(to_tensor(views)).double().numpy()
    model.train(was_training)
    C = model.prototypes.detach().double().numpy()
    codes = ssl_core.sinkhorn_codes(Z @ C.T, config.sinkhorn_epsilon, config.sinkhorn_iters, config.tau)
    return ssl_core.swav_s_loss(ssl_core.SetBatch(Z, n_per_set), C, config.tau, codes)


def smoothed(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size < window:
        return values
    return np.convolve(values, np.ones(window) / window, mode="valid")


# ---------------------------------------------------------------------------
# model construction and checkpoints
# ---------------------------------------------------------------------------

def make_model(config: PretrainConfig, init_checkpoint: Optional[Checkpoint] = None) -> SSLModel:
    """Fresh model; the encoder is loaded from ``init_checkpoint`` or ``encoder.init``."""
    torch.manual_seed(config.seed)
    model = SSLModel(config.encoder, config.n_prototypes)
    init = config.encoder.init
    if init_checkpoint is not None:
        load_module_arrays(model.encoder, init_checkpoint.arrays, "encoder")
    elif init.startswith("external:"):
        ckpt = load_checkpoint(init.split(":", 1)[1])
        load_module_arrays(model.encoder, ckpt.arrays, "encoder")
    elif init != "random":
        raise ConfigError(f"encoder init must be 'random' or 'external:PATH', got {init!r}")
    return model


def model_checkpoint(model: SSLModel, config: PretrainConfig, epoch: int, history: list[dict]) -> Checkpoint:
    arrays = {**module_arrays(model.encoder, "encoder"), **module_arrays(model.head, "head"),
              "prototypes": model.prototypes.detach().numpy().astype(np.float32)}
    metadata = {
        "kind": "pretrain",
        "objective": config.objective,
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "seed": config.seed,
        "epoch": epoch,
        "rng": {"scheme": "per-video", "seed": config.seed, "next_epoch": epoch + 1},
        "history": [{k: v for k, v in h.items() if k != "wall_time"} for h in history],
    }
    return Checkpoint(arrays, metadata)


def model_from_checkpoint(ckpt: Checkpoint) -> SSLModel:
    config = PretrainConfig.from_dict(ckpt.metadata["config"])
    config.encoder.init = "random"
    model = SSLModel(config.encoder, config.n_prototypes)
    load_module_arrays(model.encoder, ckpt.arrays, "encoder")
    load_module_arrays(model.head, ckpt.arrays, "head")
    with torch.no_grad():
        model.prototypes.copy_(torch.from_numpy(ckpt.arrays["prototypes"]))
    return model


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(dataset: Sequence[RegionSet], frames, config: PretrainConfig, log_path=None,
          on_epoch: Optional[Callable[[int, SSLModel], None]] = None,
          init_checkpoint: Optional[Checkpoint] = None) -> PretrainResult:
    """Run ``config.epochs`` of set-based self-supervised training.

    ``frames(video_id, frame_index)`` returns H x W x 3 float frames. One
    JSON metrics line per epoch goes to ``log_path`` when given.
    """
    config.validate()
    videos = list(dataset)
    if not videos:
        raise ConfigError("pre-training needs at least one video")
    set_determinism(config.seed, config.threads)
    model = make_model(config, init_checkpoint)
    model.train()

    S = min(config.batch_sets, len(videos))
    steps_per_epoch = max(1, len(videos) // S)
    total_steps = steps_per_epoch * config.epochs
    base_lr = config.base_lr * config.embeddings_per_batch / 256
    optimizer = torch.optim.SGD(model.parameters(), lr=base_lr, momentum=config.momentum,
                                weight_decay=config.weight_decay)

    probe_videos = videos[:S]
    probe_views, _, probe_n = assemble_views(probe_videos, frames, config, epoch=-1)

    log_file = open(log_path, "w", encoding="utf-8") if log_path else None
    order_rng = np.random.default_rng([config.seed, 0x0D])
    history: list[dict] = []
    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = order_rng.permutation(len(videos))
            losses = []
            for b in range(steps_per_epoch):
                batch = [videos[i] for i in order[b * S:(b + 1) * S]]
                views, _, n_per_set = assemble_views(batch, frames, config, epoch)
                lr = cosine_lr(step, total_steps, base_lr, base_lr * config.final_lr_ratio,
                               config.warmup_epochs * steps_per_epoch)
                for group in optimizer.param_groups:
                    group["lr"] = lr
                optimizer.zero_grad(set_to_none=True)
                losses.append(swav_step(model, views, n_per_set, config,
                                        update_prototypes=step >= config.freeze_prototypes_iters))
                optimizer.step()
                model.normalize_prototypes()
                step += 1
            norms = model.prototypes.detach().norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
                raise DivergenceDetected("prototype rows drifted off the unit sphere")
            record = {"epoch": epoch, "loss": float(np.mean(losses)),
                      "probe_loss": probe_loss(model, probe_views, probe_n, config),
                      "lr": lr, "wall_time": time.perf_counter() - start}
            if not math.isfinite(record["probe_loss"]):
                raise DivergenceDetected(f"non-finite probe loss at epoch {epoch}")
            history.append(record)
            log.info("epoch %d loss %.4f probe %.4f lr %.4g", epoch, record["loss"], record["probe_loss"], lr)
            if log_file:
                log_file.write(json.dumps(record) + "\n")
                log_file.flush()
            if on_epoch:
                on_epoch(epoch, model)
    finally:
        if log_file:
            log_file.close()

    trend = smoothed([h["probe_loss"] for h in history], config.smoothing_window)
    if trend.size > 1 and np.any(np.diff(trend) > 0):
        warnings.warn("probe loss is not monotonically decreasing after smoothing", TrainingProgressWarning,
                      stacklevel=2)
    return PretrainResult(model_checkpoint(model, config, config.epochs, history), model, history)


# ---------------------------------------------------------------------------
# frozen features
# ---------------------------------------------------------------------------

@torch.no_grad()
def video_features(encoder: torch.nn.Module, videos: Sequence[RegionSet], frames, n_regions: int = 8,
                   crop_size: int = 64, frames_per_video: int = 8, batch_videos: int = 64) -> np.ndarray:
    """Mean encoder feature over each video's most confident regions (unjittered)."""
    was_training = encoder.training
    encoder.eval()
    out = []
    for start in range(0, len(videos), batch_videos):
        chunk = videos[start:start + batch_videos]
        crops = [region_crop(frames, det, crop_size, None)
                 for video in chunk for det in draw_regions(video, n_regions, "test_topk", None, frames_per_video)]
        feats = encoder(to_tensor(np.stack(crops).astype(np.float32)))
        out.append(feats.reshape(len(chunk), n_regions, -1).mean(dim=1).double().numpy())
    encoder.train(was_training)
    return np.concatenate(out)


def probe_regions(videos: Sequence[RegionSet]) -> tuple[list, np.ndarray]:
    """The most confident detection in every frame, with the owning video's index."""
    dets, owner = [], []
    for v, video in enumerate(videos):
        best = {}
        for det in video.detections:
            if det.frame_index not in best or det.sort_key < best[det.frame_index].sort_key:
                best[det.frame_index] = det
        for t in sorted(best):
            dets.append(best[t])
            owner.append(v)
    return dets, np.asarray(owner)


def region_features(encoder: torch.nn.Module, videos: Sequence[RegionSet], frames, crop_size: int = 64,
                    batch_regions: int = 512, recalibrate: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Encoder features of the most confident region in every frame (unjittered).

    With ``recalibrate`` a copy of the encoder first re-estimates its
    BatchNorm statistics on these crops, so every encoder, trained or not,
    is probed under the same normalization. Returns ``(features [R, D],
    video index [R])``.
    """
    dets, owner = probe_regions(videos)
    batches = [to_tensor(np.stack([region_crop(frames, d, crop_size, None)
                                   for d in dets[i:i + batch_regions]]).astype(np.float32))
               for i in range(0, len(dets), batch_regions)]
    if recalibrate:
        encoder = copy.deepcopy(encoder)
        recalibrate_bn(encoder, batches)
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        out = [encoder(x).double().numpy() for x in batches]
    encoder.train(was_training)
    return np.concatenate(out), owner


def probe_accuracy(encoder: torch.nn.Module, videos: Sequence[RegionSet], frames, space: str = "noun",
                   held_out: float = 0.85, seed: int = 0, crop_size: int = 64) -> float:
    """Linear-probe accuracy on region features, holding out whole videos.

    The default trains on 15% of the videos: a label-scarce probe, where
    the structure of the representation matters more than its raw capacity.
    """
    feats, owner = region_features(encoder, videos, frames, crop_size, recalibrate=True)
    labels = np.array([v.verb_label if space == "verb" else v.noun_label for v in videos])
    return oracle_linear_probe(feats, labels[owner], held_out=held_out, seed=seed, groups=owner)


@torch.no_grad()
def recalibrate_bn(module: torch.nn.Module, batches) -> None:
    """Replace BatchNorm running statistics with exact averages over ``batches`` of images."""
    norms = [m for m in module.modules() if isinstance(m, torch.nn.modules.batchnorm._BatchNorm)]
    if not norms:
        return
    saved = [(m.momentum, m.training) for m in norms]
    was_training = module.training
    module.train()
    for m in norms:
        m.reset_running_stats()
        m.momentum = None
    for x in batches:
        module(x)
    for m, (momentum, _) in zip(norms, saved):
        m.momentum = momentum
    module.train(was_training)
