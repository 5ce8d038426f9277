"""Photometric and geometric view augmentation for region crops.

Applied in order: random resized crop, horizontal flip, colour jitter
(brightness, contrast, saturation, hue), random grayscale, Gaussian blur.
Each view draws its parameters from its own numpy generator, so a view is a
pure function of (crop, recipe, generator state) whether it is augmented
alone or inside a batch. Photometric ops run batched in torch.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..errors import ConfigError
from ..region_ingest import RegionCrop, resize_box

_LUMA = torch.tensor([0.299, 0.587, 0.114])
_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = torch.linalg.inv(_RGB2YIQ)


@dataclass(frozen=True)
class AugmentRecipe:
    name: str = "swav"
    resized_crop: bool = True
    crop_scale: tuple = (0.5, 1.0)
    crop_ratio: tuple = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    gray_p: float = 0.2
    blur_p: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)


RECIPES = {
    "swav": AugmentRecipe(),
    "identity": AugmentRecipe(name="identity", resized_crop=False, flip_p=0.0, jitter_p=0.0, gray_p=0.0, blur_p=0.0),
    "flip": AugmentRecipe(name="flip", resized_crop=False, jitter_p=0.0, gray_p=0.0, blur_p=0.0),
}


def get_recipe(recipe) -> AugmentRecipe:
    if isinstance(recipe, AugmentRecipe):
        return recipe
    try:
        return RECIPES[recipe]
    except KeyError:
        raise ConfigError(f"unknown augmentation recipe {recipe!r}; known: {sorted(RECIPES)}") from None


def _resized_crop_box(h, w, recipe, rng):
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*recipe.crop_scale)
        ratio = np.exp(rng.uniform(np.log(recipe.crop_ratio[0]), np.log(recipe.crop_ratio[1])))
        cw, ch = np.sqrt(target * ratio), np.sqrt(target / ratio)
        if cw <= w and ch <= h:
            x0 = rng.uniform(0, w - cw)
            y0 = rng.uniform(0, h - ch)
            return (x0, y0, x0 + cw, y0 + ch)
    return (0.0, 0.0, float(w), float(h))


def _draw_photometric(recipe: AugmentRecipe, rng) -> tuple:
    """(brightness, contrast, saturation, hue, gray, blur sigma) for one view; identity values when skipped."""
    b = c = s = 1.0
    hue = 0.0
    if rng.random() < recipe.jitter_p:
        b = rng.uniform(1 - recipe.brightness, 1 + recipe.brightness)
        c = rng.uniform(1 - recipe.contrast, 1 + recipe.contrast)
        s = rng.uniform(1 - recipe.saturation, 1 + recipe.saturation)
        hue = rng.uniform(-recipe.hue, recipe.hue)
    gray = rng.random() < recipe.gray_p
    sigma = rng.uniform(*recipe.blur_sigma) if rng.random() < recipe.blur_p else 0.0
    return b, c, s, hue, gray, sigma


def _gray(x: torch.Tensor) -> torch.Tensor:
    return torch.einsum("bchw,c->bhw", x, _LUMA.to(x.dtype)).unsqueeze(1)


def _hue_rotation(hue: torch.Tensor) -> torch.Tensor:
    """Per-view 3x3 RGB matrices rotating chroma by ``hue`` turns in YIQ space."""
    theta = hue * 2 * np.pi
    cos, sin = torch.cos(theta), torch.sin(theta)
    rot = torch.zeros(hue.shape[0], 3, 3, dtype=hue.dtype)
    rot[:, 0, 0] = 1
    rot[:, 1, 1], rot[:, 1, 2] = cos, -sin
    rot[:, 2, 1], rot[:, 2, 2] = sin, cos
    return _YIQ2RGB.to(hue.dtype) @ rot @ _RGB2YIQ.to(hue.dtype)


def _blur(x: torch.Tensor, sigma: torch.Tensor, max_sigma: float) -> torch.Tensor:
    blurred = sigma > 0
    if not torch.any(blurred):
        return x
    h, w = x.shape[-2:]
    # fixed by the recipe, not the batch, so a view never depends on its neighbours
    radius = int(min(np.ceil(3 * max_sigma), (min(h, w) - 1) // 2))
    offsets = torch.arange(-radius, radius + 1, dtype=x.dtype)
    safe = torch.where(blurred, sigma, torch.ones_like(sigma))
    kern = torch.exp(-0.5 * (offsets[None] / safe[:, None]) ** 2)
    kern = kern / kern.sum(dim=1, keepdim=True)
    idx = blurred.nonzero().flatten()
    sub = x[idx]
    n, ch = sub.shape[:2]
    k = kern[idx].repeat_interleave(ch, dim=0)
    flat = F.pad(sub.reshape(1, n * ch, h, w), (radius, radius, radius, radius), mode="reflect")
    flat = F.conv2d(flat, k[:, None, None, :], groups=n * ch)
    flat = F.conv2d(flat, k[:, None, :, None], groups=n * ch)
    out = x.clone()
    out[idx] = flat.reshape(n, ch, h, w)
    return out


def augment_batch(crops: Sequence[np.ndarray], recipe, rngs: Sequence[np.random.Generator]) -> np.ndarray:
    """Augment a list of H x W x 3 float crops; returns a (B, H, W, 3) float32 array."""
    recipe = get_recipe(recipe)
    geo, params = [], []
    for crop, rng in zip(crops, rngs):
        h, w = crop.shape[:2]
        out = crop
        if recipe.resized_crop:
            out = resize_box(out, _resized_crop_box(h, w, recipe, rng), h, w)
        if rng.random() < recipe.flip_p:
            out = out[:, ::-1]
        geo.append(np.ascontiguousarray(out, dtype=np.float32))
        params.append(_draw_photometric(recipe, rng))
    stack = np.stack(geo)
    if all(p == (1.0, 1.0, 1.0, 0.0, False, 0.0) for p in params):
        return stack

    x = torch.from_numpy(stack).permute(0, 3, 1, 2)
    b, c, s, hue, gray, sigma = (torch.tensor(col, dtype=torch.float32) for col in zip(*params))
    x = (x * b[:, None, None, None]).clamp(0, 1)
    mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
    x = (c[:, None, None, None] * x + (1 - c[:, None, None, None]) * mean).clamp(0, 1)
    x = (s[:, None, None, None] * x + (1 - s[:, None, None, None]) * _gray(x)).clamp(0, 1)
    if torch.any(hue != 0):
        x = torch.einsum("bij,bjhw->bihw", _hue_rotation(hue), x).clamp(0, 1)
    g = gray.bool()
    x = torch.where(g[:, None, None, None], _gray(x).expand_as(x), x)
    x = _blur(x, sigma, recipe.blur_sigma[1])
    return x.clamp(0, 1).permute(0, 2, 3, 1).contiguous().numpy()


def augment_array(crop: np.ndarray, recipe, rng: np.random.Generator) -> np.ndarray:
    return augment_batch([crop], recipe, [rng])[0]


def augment(crop: RegionCrop, recipe, rng: np.random.Generator) -> RegionCrop:
    return replace(crop, crop=augment_array(crop.crop, recipe, rng))
