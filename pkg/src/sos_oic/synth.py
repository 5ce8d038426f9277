"""Procedural "videos" of handled objects with known latent structure.

Each video shows one object drawn from G textured templates (its latent
cluster, which fixes the noun) moving along a smooth cubic path in
translation, log-scale and angle. The verb fixes the path family: the
direction the hand approaches the object from and the sense of rotation.
Detections locate the object (plus detector-style duplicates and low
confidence false positives) and the hand; labels follow an exponential
long-tail profile with head:tail ratio ``imbalance_ratio``.

A noun-weak "base model" logit file is produced alongside, standing in for a
frame-level video network that recognises verbs well and objects poorly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from sklearn.linear_model import LogisticRegression
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import StandardScaler

from . import dataset as ds
from .errors import DegenerateLabels, SpecInvalid
from .records import LogitRecord, write_logits
from .region_ingest import DetectionRecord, build_region_sets, video_rng, write_manifest


@dataclass
class SynthSpec:
    n_videos: int = 256
    n_clusters: int = 8
    n_verb_classes: int = 8
    n_noun_classes: int = 8
    imbalance_ratio: float = 20.0
    frames_per_video: int = 8
    regions_per_frame: int = 3
    patch_size: int = 64
    noise_level: float = 0.05
    seed: int = 0
    frame_size: int = 128
    # 0 freezes every video at its initial pose
    motion: float = 1.0
    hands: bool = True
    # clusters sharing one colour palette; they differ only in shape and texture
    clusters_per_palette: int = 1
    # per-video multiplicative colour gain spread
    appearance_jitter: float = 0.15
    # per-frame hue rotation of the object (lighting flicker), as a fraction of a full turn
    hue_jitter: float = 0.0
    # per-frame per-channel gain on the whole frame (scene lighting)
    lighting_jitter: float = 0.25
    # small patches of other clusters scattered around the object in every frame
    distractors: int = 2
    false_positive_rate: float = 0.2
    n_participants: int = 16
    n_unseen_participants: int = 2
    val_fraction: float = 0.25
    base_verb_strength: float = 2.5
    base_noun_strength: float = 0.6

    def validate(self) -> None:
        positive = ("n_videos", "n_clusters", "n_verb_classes", "n_noun_classes", "frames_per_video",
                    "regions_per_frame", "patch_size", "frame_size", "n_participants", "clusters_per_palette")
        for name in positive:
            if getattr(self, name) < 1:
                raise SpecInvalid(f"{name} must be >= 1")
        if self.imbalance_ratio < 1:
            raise SpecInvalid("imbalance_ratio must be >= 1")
        if min(self.noise_level, self.motion, self.appearance_jitter, self.lighting_jitter, self.distractors) < 0:
            raise SpecInvalid("noise, motion, jitter and distractor settings must be non-negative")
        if self.n_clusters < self.n_noun_classes:
            raise SpecInvalid("need at least one latent cluster per noun class")
        if self.patch_size > self.frame_size:
            raise SpecInvalid("patch_size cannot exceed frame_size")
        if not 0 <= self.false_positive_rate <= 1:
            raise SpecInvalid("false_positive_rate must lie in [0, 1]")
        if not 0 < self.val_fraction < 1:
            raise SpecInvalid("val_fraction must lie in (0, 1)")
        if not 0 <= self.n_unseen_participants < self.n_participants:
            raise SpecInvalid("n_unseen_participants must be smaller than n_participants")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise SpecInvalid(f"unknown SynthSpec fields: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class SynthDataset:
    spec: SynthSpec
    frames: ds.MemoryFrames
    detections: list[DetectionRecord]
    labels: dict[str, ds.VideoLabel]
    header: ds.DatasetHeader
    base_logits: list[LogitRecord]
    templates: np.ndarray
    latent: dict[str, dict]

    def to_dataset(self, conf_threshold: float = 0.01, max_per_frame: int = 3) -> ds.Dataset:
        sets = build_region_sets([d for d in self.detections if d.kind == "object"],
                                 {v: (l.verb, l.noun) for v, l in self.labels.items()},
                                 conf_threshold, max_per_frame)
        return ds.Dataset(self.header, self.labels, sets, self.frames)

    def write(self, root) -> Path:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        ds.write_header(root / ds.HEADER_FILE, self.header)
        ds.write_labels(root / ds.LABELS_FILE, self.labels)
        write_manifest(root / ds.MANIFEST_FILE, self.detections)
        write_logits(root / ds.BASE_LOGITS_FILE, self.base_logits)
        (root / "synth_spec.json").write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")
        self.frames.save(root / ds.FRAMES_DIR)
        return root


# ---------------------------------------------------------------------------
# label profile
# ---------------------------------------------------------------------------

def longtail_counts(n_items: int, n_classes: int, ratio: float) -> np.ndarray:
    """Integer class counts following ``ratio ** (-rank / (C - 1))``, summing to ``n_items``.

    Largest-remainder rounding; class 0 is the head.
    """
    if n_classes == 1:
        return np.array([n_items])
    weights = ratio ** (-np.arange(n_classes) / (n_classes - 1))
    exact = n_items * weights / weights.sum()
    counts = np.floor(exact).astype(int)
    short = n_items - counts.sum()
    order = np.argsort(-(exact - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def _labels_from_counts(counts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.repeat(np.arange(len(counts)), counts))


def tail_classes(counts, head_share: float = 0.8) -> list[int]:
    """Classes outside the most frequent prefix that covers ``head_share`` of instances."""
    counts = np.asarray(counts)
    order = np.argsort(-counts, kind="stable")
    covered = np.cumsum(counts[order]) / max(counts.sum(), 1)
    n_head = int(np.searchsorted(covered, head_share - 1e-12) + 1)
    return sorted(int(c) for c in order[n_head:])


# ---------------------------------------------------------------------------
# appearance
# ---------------------------------------------------------------------------

def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255) / 255


def make_templates(spec: SynthSpec) -> np.ndarray:
    """G opaque ``patch_size`` square textures, quantized to 8-bit levels."""
    rng = np.random.default_rng([spec.seed, 0x7E])
    P = spec.patch_size
    v, u = np.mgrid[0:P, 0:P]
    u = (u + 0.5) / P * 2 - 1
    v = (v + 0.5) / P * 2 - 1
    radius, theta = np.hypot(u, v), np.arctan2(v, u)
    n_palettes = -(-spec.n_clusters // spec.clusters_per_palette)
    palettes = [rng.uniform(0.1, 0.9, size=(3, 3)) for _ in range(n_palettes)]
    lobes = rng.permutation(np.arange(spec.n_clusters)) % 6
    templates = []
    for g in range(spec.n_clusters):
        backdrop, ink_a, ink_b = palettes[g // spec.clusters_per_palette]
        amp = 0.12 + 0.2 * rng.random()
        phase = rng.uniform(0, 2 * np.pi)
        edge = 0.78 * (1 + amp * np.cos(lobes[g] * theta + phase)) / (1 + amp)
        inside = 1 / (1 + np.exp(-(edge - radius) * 40))
        freq = rng.uniform(1.5, 4.5)
        psi = rng.uniform(0, np.pi)
        if g % 2:
            pattern = np.sin(np.pi * freq * (u * np.cos(psi) + v * np.sin(psi)))
        else:
            pattern = np.sin(np.pi * freq * radius * 1.5 + phase)
        stripes = 1 / (1 + np.exp(-pattern * 6))
        ink = stripes[..., None] * ink_a + (1 - stripes[..., None]) * ink_b
        img = inside[..., None] * ink + (1 - inside[..., None]) * backdrop
        templates.append(_quantize(img))
    return np.stack(templates).astype(np.float64)


_RGB2YIQ = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])


def _rotate_hue(img: np.ndarray, turns: float) -> np.ndarray:
    if turns == 0:
        return img
    c, s = np.cos(2 * np.pi * turns), np.sin(2 * np.pi * turns)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    return np.clip(img @ (np.linalg.inv(_RGB2YIQ) @ rot @ _RGB2YIQ).T, 0, 1)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    c0, c1 = rng.uniform(0.15, 0.85, size=(2, 3))
    angle = rng.uniform(0, 2 * np.pi)
    y, x = np.mgrid[0:size, 0:size] / size
    ramp = (x * np.cos(angle) + y * np.sin(angle))
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    blotch = ndimage.gaussian_filter(rng.standard_normal((size, size)), size / 10)
    blotch = blotch / (np.abs(blotch).max() + 1e-9) * 0.08
    return ramp[..., None] * c1 + (1 - ramp[..., None]) * c0 + blotch[..., None]


def _warp_patch(template: np.ndarray, size: int, center, angle: float, scale: float):
    """Place a rotated, scaled copy of ``template`` centred at ``center`` (x, y, index coords)."""
    P = template.shape[0]
    cos, sin = np.cos(angle), np.sin(angle)
    # maps output (y, x) to template (y, x)
    inv = np.array([[cos, sin], [-sin, cos]]) / scale
    c_out = np.array([center[1], center[0]])
    offset = (P - 1) / 2 - inv @ c_out
    channels = [ndimage.affine_transform(template[..., ch], inv, offset, output_shape=(size, size), order=1,
                                         mode="constant", cval=0.0) for ch in range(3)]
    alpha = ndimage.affine_transform(np.ones((P, P)), inv, offset, output_shape=(size, size), order=1,
                                     mode="constant", cval=0.0)
    half = P / 2 * scale
    corners = np.array([[-half, -half], [half, -half], [half, half], [-half, half]])
    rot = np.array([[cos, -sin], [sin, cos]])
    pts = corners @ rot.T + np.array(center) + 0.5
    box = (pts[:, 0].min(), pts[:, 1].min(), pts[:, 0].max(), pts[:, 1].max())
    return np.stack(channels, axis=-1), alpha, box


def _ellipse(size, center, axes, angle):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    dx, dy = x - center[0], y - center[1]
    c, s = np.cos(angle), np.sin(angle)
    a = (dx * c + dy * s) / axes[0]
    b = (-dx * s + dy * c) / axes[1]
    return np.clip((1.0 - np.hypot(a, b)) * 6.0, 0.0, 1.0)


def _clip_box(box, size) -> Optional[tuple]:
    x1, y1, x2, y2 = (float(np.clip(c, 0, size)) for c in box)
    if x2 - x1 < 2 or y2 - y1 < 2:
        return None
    return (x1, y1, x2, y2)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

def _verb_path(verb: int, n_verbs: int):
    """Hand approach angle and rotation sense fixed by the verb."""
    approach = 2 * np.pi * (verb % max(n_verbs, 1)) / max(n_verbs, 1)
    spin = 1.0 if verb % 2 == 0 else -1.0
    return approach, spin


def _cubic(rng, start, delta):
    """Cubic path p(s), s in [0, 1], from ``start`` by ``delta`` with random curvature."""
    c2, c3 = rng.uniform(-0.3, 0.3, size=2) * delta
    return lambda s: start + (delta - c2 - c3) * s + c2 * s ** 2 + c3 * s ** 3


def _render_video(spec: SynthSpec, templates: np.ndarray, cluster: int, verb: int, rng: np.random.Generator):
    template = templates[cluster]
    size, P, T = spec.frame_size, spec.patch_size, spec.frames_per_video
    approach, spin = _verb_path(verb, spec.n_verb_classes)
    m = spec.motion
    base_scale = rng.uniform(0.55, 0.8) if m else 1.0
    angle = _cubic(rng, rng.uniform(0, 2 * np.pi) * min(m, 1.0), spin * m * rng.uniform(0.8, 1.4))
    log_scale = _cubic(rng, 0.0, m * rng.uniform(-0.25, 0.25))
    margin = P * base_scale * 0.55
    lo, hi = margin, size - margin
    start = rng.uniform(lo, hi, size=2) if m else np.full(2, np.floor((size - P) / 2) + (P - 1) / 2)
    drift = rng.uniform(-0.2, 0.2, size=2) * size * m
    path_x = _cubic(rng, start[0], drift[0])
    path_y = _cubic(rng, start[1], drift[1])
    gain = 1 + rng.uniform(-1, 1, size=3) * spec.appearance_jitter

    frames, boxes, hand_boxes = [], [], []
    for t in range(T):
        s = t / (T - 1) if T > 1 else 0.0
        cx = float(np.clip(path_x(s), lo, hi)) if m else start[0]
        cy = float(np.clip(path_y(s), lo, hi)) if m else start[1]
        scale = base_scale * float(np.exp(log_scale(s)))
        lit = _rotate_hue(template, rng.uniform(-1, 1) * spec.hue_jitter)
        patch, alpha, box = _warp_patch(np.clip(lit * gain, 0, 1), size, (cx, cy), angle(s), scale)
        # scene and lighting change every frame; only the object persists
        bg = _background(rng, size)
        frame = alpha[..., None] * patch + (1 - alpha[..., None]) * bg
        others = [g for g in range(len(templates)) if g != cluster]
        for _ in range(spec.distractors if others else 0):
            offset = rng.uniform(-1, 1, size=2) * P * scale * 0.6
            d_patch, d_alpha, _ = _warp_patch(templates[rng.choice(others)], size, (cx + offset[0], cy + offset[1]),
                                              rng.uniform(0, 2 * np.pi), scale * rng.uniform(0.25, 0.4))
            frame = d_alpha[..., None] * d_patch + (1 - d_alpha[..., None]) * frame
        hand_box = None
        if spec.hands:
            reach = P * scale * 0.5
            hx, hy = cx + np.cos(approach) * reach, cy + np.sin(approach) * reach
            axes = (P * scale * 0.32, P * scale * 0.18)
            mask = _ellipse(size, (hx, hy), axes, approach)
            skin = np.array([0.87, 0.67, 0.53]) * rng.uniform(0.85, 1.1)
            frame = mask[..., None] * skin + (1 - mask[..., None]) * frame
            extent = max(axes)
            hand_box = _clip_box((hx - extent + 0.5, hy - extent + 0.5, hx + extent + 0.5, hy + extent + 0.5), size)
        if spec.lighting_jitter > 0:
            frame = frame * (1 + rng.uniform(-1, 1, size=3) * spec.lighting_jitter)
        if spec.noise_level > 0:
            frame = frame + rng.normal(0, spec.noise_level, frame.shape)
        frames.append(np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8))
        boxes.append(_clip_box(box, size))
        hand_boxes.append(hand_box)
    return np.stack(frames), boxes, hand_boxes


def _frame_detections(spec, video_id, t, box, hand_box, rng) -> list[DetectionRecord]:
    size = spec.frame_size
    out = []
    if box is not None:
        main_conf = float(rng.uniform(0.55, 0.99))
        out.append(DetectionRecord(video_id, t, box, round(main_conf, 4)))
        w, h = box[2] - box[0], box[3] - box[1]
        for _ in range(int(rng.integers(0, spec.regions_per_frame))):
            shift = rng.uniform(-0.15, 0.15, size=2) * (w, h)
            grow = rng.uniform(0.85, 1.15)
            cx, cy = (box[0] + box[2]) / 2 + shift[0], (box[1] + box[3]) / 2 + shift[1]
            dup = _clip_box((cx - w * grow / 2, cy - h * grow / 2, cx + w * grow / 2, cy + h * grow / 2), size)
            if dup is not None:
                out.append(DetectionRecord(video_id, t, dup, round(main_conf * float(rng.uniform(0.3, 0.9)), 4)))
    if rng.random() < spec.false_positive_rate:
        side = rng.uniform(0.15, 0.35) * size
        x, y = rng.uniform(0, size - side, size=2)
        out.append(DetectionRecord(video_id, t, (x, y, x + side, y + side), round(float(rng.uniform(0.001, 0.2)), 4)))
    if hand_box is not None:
        out.append(DetectionRecord(video_id, t, hand_box, round(float(rng.uniform(0.6, 0.99)), 4), "hand"))
    return out


def _base_logits(spec, labels, rng) -> list[LogitRecord]:
    out = []
    for vid in sorted(labels):
        lab = labels[vid]
        verb = rng.standard_normal(spec.n_verb_classes)
        noun = rng.standard_normal(spec.n_noun_classes)
        verb[lab.verb] += spec.base_verb_strength
        noun[lab.noun] += spec.base_noun_strength
        out.append(LogitRecord(vid, verb, noun, "synth-base"))
    return out


def _splits(spec, video_ids, participants, rng):
    people = [f"P{p:02d}" for p in range(spec.n_participants)]
    unseen = sorted(rng.choice(people, size=spec.n_unseen_participants, replace=False).tolist())
    val = {v for v, p in zip(video_ids, participants) if p in unseen}
    target = int(round(spec.val_fraction * len(video_ids)))
    rest = [v for v in video_ids if v not in val]
    extra = max(0, target - len(val))
    val |= set(rng.choice(rest, size=min(extra, len(rest)), replace=False).tolist())
    train = [v for v in video_ids if v not in val]
    return {"train": train, "val": sorted(val)}, unseen


def generate(spec: SynthSpec) -> SynthDataset:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0x5E7])
    templates = make_templates(spec)
    noun_counts = longtail_counts(spec.n_videos, spec.n_noun_classes, spec.imbalance_ratio)
    verb_counts = longtail_counts(spec.n_videos, spec.n_verb_classes, spec.imbalance_ratio)
    nouns = _labels_from_counts(noun_counts, rng)
    verbs = _labels_from_counts(verb_counts, rng)
    # clusters beyond the noun count map back onto nouns round-robin
    cluster_of_noun = {n: [g for g in range(spec.n_clusters) if g % spec.n_noun_classes == n]
                       for n in range(spec.n_noun_classes)}
    participants = [f"P{p:02d}" for p in rng.integers(0, spec.n_participants, size=spec.n_videos)]

    video_ids = [f"v{i:05d}" for i in range(spec.n_videos)]
    frames, detections, labels, latent = {}, [], {}, {}
    for i, vid in enumerate(video_ids):
        vrng = video_rng(spec.seed, vid, "synth")
        noun, verb = int(nouns[i]), int(verbs[i])
        options = cluster_of_noun[noun]
        cluster = int(options[int(vrng.integers(len(options)))])
        stack, boxes, hand_boxes = _render_video(spec, templates, cluster, verb, vrng)
        frames[vid] = stack
        for t, (box, hand_box) in enumerate(zip(boxes, hand_boxes)):
            detections.extend(_frame_detections(spec, vid, t, box, hand_box, vrng))
        labels[vid] = ds.VideoLabel(verb, noun, participants[i])
        latent[vid] = {"cluster": cluster}

    splits, unseen = _splits(spec, video_ids, participants, rng)
    train = set(splits["train"])
    train_verbs = np.bincount([labels[v].verb for v in train], minlength=spec.n_verb_classes)
    train_nouns = np.bincount([labels[v].noun for v in train], minlength=spec.n_noun_classes)
    header = ds.DatasetHeader(
        n_verbs=spec.n_verb_classes, n_nouns=spec.n_noun_classes, splits=splits,
        tail_verbs=tail_classes(train_verbs), tail_nouns=tail_classes(train_nouns),
        unseen_participants=unseen, extra={"source": "synth", "frame_size": spec.frame_size},
    )
    base = _base_logits(spec, labels, np.random.default_rng([spec.seed, 0xBA5E]))
    return SynthDataset(spec, ds.MemoryFrames(frames), detections, labels, header, base, templates, latent)


# ---------------------------------------------------------------------------
# linear probe oracle
# ---------------------------------------------------------------------------

def _split_groups(y: np.ndarray, groups: np.ndarray, held_out: float, seed: int):
    """Boolean test mask holding out whole groups, stratified by group label when possible."""
    uniq, first = np.unique(groups, return_index=True)
    g_label = y[first]
    _, counts = np.unique(g_label, return_counts=True)
    stratify = g_label if counts.min() >= 2 else None
    _, test_groups = train_test_split(uniq, test_size=held_out, random_state=seed, stratify=stratify)
    return np.isin(groups, test_groups)


def oracle_linear_probe(embeddings, labels, held_out: float = 0.3, seed: int = 0,
                        regularization: float = 1.0, groups=None) -> float:
    """Held-out accuracy of a multinomial logistic regression on frozen features.

    The split is stratified when every class has at least two members. With
    ``groups`` (e.g. video ids) whole groups go to one side, so near-duplicate
    samples never straddle the split. The convex fit runs L-BFGS to tolerance
    1e-6, so results are deterministic.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2:
        raise DegenerateLabels("the linear probe needs at least two classes")
    if groups is not None:
        test = _split_groups(y, np.asarray(groups), held_out, seed)
        X_tr, X_te, y_tr, y_te = X[~test], X[test], y[~test], y[test]
    else:
        stratify = y if counts.min() >= 2 else None
        X_tr, X_te, y_tr, y_te = train_test_split(X, y, test_size=held_out, random_state=seed, stratify=stratify)
    if np.unique(y_tr).size < 2:
        raise DegenerateLabels("training split holds a single class")
    scaler = StandardScaler().fit(X_tr)
    clf = LogisticRegression(C=regularization, tol=1e-6, max_iter=10000)
    clf.fit(scaler.transform(X_tr), y_tr)
    return float(np.mean(clf.predict(scaler.transform(X_te)) == y_te))
