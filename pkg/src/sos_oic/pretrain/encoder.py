"""Region encoder, projection head and prototype bank as torch modules."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import ConfigError


@dataclass
class EncoderSpec:
    arch: str = "conv4"
    widths: tuple = (16, 32, 64, 128)
    proj_hidden: int = 256
    embed_dim: int = 128
    # "random" or "external:<checkpoint path>"
    init: str = "random"

    @property
    def feat_dim(self) -> int:
        return self.widths[-1]


class ConvEncoder(nn.Module):
    """Strided 3x3 conv blocks followed by global average pooling."""

    def __init__(self, widths=(32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        layers, c = [], in_channels
        for w in widths:
            layers += [nn.Conv2d(c, w, 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(w), nn.ReLU(inplace=True)]
            c = w
        self.features = nn.Sequential(*layers)
        self.out_dim = c

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.features(x), 1).flatten(1)


class ProjectionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(in_dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
                                 nn.Linear(hidden, out_dim))

    def forward(self, x):
        return F.normalize(self.net(x), dim=1)


class SSLModel(nn.Module):
    """Encoder + projection head + unit-norm prototypes."""

    def __init__(self, spec: EncoderSpec, n_prototypes: int):
        super().__init__()
        self.spec = spec
        self.encoder = build_encoder(spec)
        self.head = ProjectionHead(spec.feat_dim, spec.proj_hidden, spec.embed_dim)
        self.prototypes = nn.Parameter(F.normalize(torch.randn(n_prototypes, spec.embed_dim), dim=1))

    def embed(self, x):
        return self.head(self.encoder(x))

    @torch.no_grad()
    def normalize_prototypes(self):
        self.prototypes.copy_(F.normalize(self.prototypes, dim=1))


def build_encoder(spec: EncoderSpec) -> nn.Module:
    if spec.arch != "conv4":
        raise ConfigError(f"unknown encoder architecture {spec.arch!r}")
    return ConvEncoder(spec.widths)


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    """State dict of ``module`` as float32 arrays with dotted names under ``prefix``."""
    return {f"{prefix}.{k}": v.detach().cpu().numpy().astype(np.float32) for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray], prefix: str) -> None:
    own = module.state_dict()
    missing = [k for k in own if f"{prefix}.{k}" not in arrays]
    if missing:
        raise ConfigError(f"checkpoint lacks {prefix} weights: {missing[:3]}")
    state = {k: torch.from_numpy(np.array(arrays[f"{prefix}.{k}"])).to(v.dtype).reshape(v.shape)
             for k, v in own.items()}
    module.load_state_dict(state)
