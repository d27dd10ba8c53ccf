"""Detector graph assembly and inference."""

from .blocks import (
    BOTTLENECKS,
    CBS,
    SPPF,
    STEMS,
    BatchNorm2d,
    Conv2d,
    ConvAct,
    RepC2f,
    RepConv,
)
from .config import BOTTLENECK_KINDS, PRESETS, STEM_KINDS, ModelConfig, model_config
from .model import (
    FaceLandmarkNet,
    HeadOutputs,
    build_model,
    count_flops,
    count_params,
    deploy,
    forward,
    make_divisible,
    scaled_widths,
)

__all__ = [
    "BOTTLENECKS",
    "BOTTLENECK_KINDS",
    "CBS",
    "SPPF",
    "STEMS",
    "STEM_KINDS",
    "PRESETS",
    "BatchNorm2d",
    "Conv2d",
    "ConvAct",
    "FaceLandmarkNet",
    "HeadOutputs",
    "ModelConfig",
    "RepC2f",
    "RepConv",
    "build_model",
    "count_flops",
    "count_params",
    "deploy",
    "forward",
    "make_divisible",
    "model_config",
    "scaled_widths",
]
