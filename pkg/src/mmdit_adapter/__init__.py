"""Image-prompt adapter for a miniature multimodal diffusion transformer."""

from .encoder import EncoderConfig, HierEncoder, HierFeatures, encode, load_features, save_features
from .hmoe import FusionCoefficients, HMoEFFM, fuse, manual_coefficients, route
from .mmdit import AttentionMode, MMDiT, ModelConfig, SubjectCondition
from .tensor import Tape, Tensor, backward

__all__ = [
    "AttentionMode", "EncoderConfig", "FusionCoefficients", "HMoEFFM", "HierEncoder",
    "HierFeatures", "MMDiT", "ModelConfig", "SubjectCondition", "Tape", "Tensor", "backward",
    "encode", "fuse", "load_features", "manual_coefficients", "route", "save_features",
]
