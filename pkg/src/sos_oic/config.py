"""Versioned run configuration shared by every command.

Precedence is command-line flags over the config file over defaults. Each
run writes the resolved document and its git-style blob hash next to its
outputs, so a run can be rebuilt from that file alone.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from .errors import ConfigError
from .finetune import FinetuneConfig
from .pretrain.engine import PretrainConfig
from .synth import SynthSpec

CONFIG_VERSION = 1
RESOLVED_FILE = "resolved_config.json"


@dataclass
class FusionConfig:
    pilot_fraction: float = 0.3
    # None means the default {0, 0.1, ..., 1}^2 grid without (0, 0)
    grid: Optional[list] = None


@dataclass
class AblationConfig:
    # epochs for the desk-scale ablation grid; the defaults keep a full run near ten minutes on one core
    pretrain_epochs: int = 40
    finetune_epochs: int = 20
    # seed offset of the held-out synthetic distribution used for Stage I emulation
    heldout_seed_offset: int = 1000


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    threads: int = 1
    synth: SynthSpec = field(default_factory=SynthSpec)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "seed": self.seed,
            "threads": self.threads,
            "synth": asdict(self.synth),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "fusion": asdict(self.fusion),
            "ablation": asdict(self.ablation),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        version = obj.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"config version {version} is not supported (expected {CONFIG_VERSION})")
        known = {"seed", "threads", "synth", "pretrain", "finetune", "fusion", "ablation"}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            return cls(
                version=version,
                seed=int(obj.get("seed", 0)),
                threads=int(obj.get("threads", 1)),
                synth=SynthSpec.from_dict(obj.get("synth", {})),
                pretrain=PretrainConfig.from_dict(obj.get("pretrain", {})),
                finetune=FinetuneConfig.from_dict(obj.get("finetune", {})),
                fusion=FusionConfig(**obj.get("fusion", {})),
                ablation=AblationConfig(**obj.get("ablation", {})),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    def propagate(self) -> "RunConfig":
        """Copy the run-wide seed and thread count into every stage."""
        self.synth.seed = self.seed
        for stage in (self.pretrain, self.finetune):
            stage.seed = self.seed
            stage.threads = self.threads
        return self


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def set_dotted(doc: dict, dotted: str, value: Any) -> None:
    node = doc
    *path, leaf = dotted.split(".")
    for key in path:
        node = node.setdefault(key, {})
    node[leaf] = value


def load_document(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    return doc


def resolve(path=None, overrides: Optional[dict] = None) -> RunConfig:
    """Defaults, then the file at ``path``, then dotted-key ``overrides``."""
    doc = RunConfig().to_dict()
    file_doc = load_document(path) if path else {}
    doc = _merge(doc, file_doc)
    for key, value in (overrides or {}).items():
        if value is not None:
            set_dotted(doc, key, value)
    cfg = RunConfig.from_dict(doc)
    # a seed or thread count given at the top level reaches every stage
    if "seed" in file_doc or (overrides or {}).get("seed") is not None:
        cfg.synth.seed = cfg.pretrain.seed = cfg.finetune.seed = cfg.seed
    if "threads" in file_doc or (overrides or {}).get("threads") is not None:
        cfg.pretrain.threads = cfg.finetune.threads = cfg.threads
    return cfg


def canonical(doc: dict) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + "\n").encode("utf-8")


def blob_hash(data: bytes) -> str:
    """The id git would give ``data`` as a blob."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_resolved(out_dir, cfg: RunConfig, command: str, extra: Optional[dict] = None) -> str:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg.to_dict(), **(extra or {})}
    data = canonical(doc)
    digest = blob_hash(data)
    (out_dir / RESOLVED_FILE).write_bytes(data)
    (out_dir / (RESOLVED_FILE + ".hash")).write_text(digest + "\n", encoding="utf-8")
    return digest
