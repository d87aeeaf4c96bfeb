"""Semantic-guided face deblurring: coarse deblur, face parsing, parsing-guided fine deblur."""

from __future__ import annotations

__version__ = "0.1.0"

from .blur import BlurKernel, DegradationConfig, apply_blur, random_kernel
from .config import RunConfig, load_config, profile_config
from .dataset import DEFAULT_SCHEMA, LabelSchema
from .networks import FaceDeblurModel

__all__ = [
    "BlurKernel",
    "DEFAULT_SCHEMA",
    "DegradationConfig",
    "FaceDeblurModel",
    "LabelSchema",
    "RunConfig",
    "apply_blur",
    "load_config",
    "profile_config",
    "random_kernel",
]
