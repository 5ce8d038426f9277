from .augment import RECIPES, AugmentRecipe, augment, augment_array, get_recipe
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .encoder import ConvEncoder, EncoderSpec, ProjectionHead, SSLModel
from .engine import (PretrainConfig, PretrainResult, build_batch, model_from_checkpoint, train,
                     video_features)

__all__ = [
    "RECIPES", "AugmentRecipe", "augment", "augment_array", "get_recipe",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "ConvEncoder", "EncoderSpec", "ProjectionHead", "SSLModel",
    "PretrainConfig", "PretrainResult", "build_batch", "model_from_checkpoint", "train", "video_features",
]
