"""
Small convolutional feature extractor producing F_enc (N x H x W x C).

Stands in for a pretrained ImageNet backbone. Features computed by an external
backbone can be brought in through :func:`load_feature_file`.
"""
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from src.autograd.tensor import Tensor
from src.error_handling import CorruptContainerError, ShapeMismatchError
from src.model.nn_ops import Conv2dParams, conv2d, init_conv2d, relu
from src.storage.container import read_container, write_container

logger = logging.getLogger(__name__)

FEATURE_ENTRY = "features"


class BackboneConfig(BaseModel):
    widths: List[int] = [16, 32, 64]
    strides: List[int] = [2, 2, 2]
    input_height: int = 64
    input_width: int = 64
    input_channels: int = 3

    @field_validator("strides")
    @classmethod
    def _strides(cls, v: List[int]) -> List[int]:
        if any(s not in (1, 2) for s in v):
            raise ValueError(f"every stride must be 1 or 2, got {v}")
        return v

    @field_validator("widths")
    @classmethod
    def _widths(cls, v: List[int]) -> List[int]:
        if not v or any(w < 1 for w in v):
            raise ValueError(f"stage widths must be a non-empty list of positive ints, got {v}")
        return v

    @model_validator(mode="after")
    def _consistent(self) -> "BackboneConfig":
        if len(self.widths) != len(self.strides):
            raise ValueError(f"{len(self.widths)} stage widths but {len(self.strides)} strides")
        factor = self.downsample
        if self.input_height % factor or self.input_width % factor:
            raise ValueError(
                f"input {self.input_height}x{self.input_width} is not divisible by the total stride {factor}"
            )
        return self

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    @property
    def output_channels(self) -> int:
        return self.widths[-1]

    @property
    def output_shape(self) -> Tuple[int, int, int]:
        return self.input_height // self.downsample, self.input_width // self.downsample, self.output_channels


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator) -> List[Conv2dParams]:
    stages = []
    cin = cfg.input_channels
    for width, stride in zip(cfg.widths, cfg.strides):
        stages.append(init_conv2d(rng, 3, 3, cin, width, stride=stride))
        cin = width
    return stages


def backbone_forward(image: Tensor, cfg: BackboneConfig, params: List[Conv2dParams]) -> Tensor:
    """Stack of 3x3 conv (same padding, per-stage stride) + ReLU."""
    expected = (cfg.input_height, cfg.input_width, cfg.input_channels)
    if image.ndim != 4 or image.shape[1:] != expected:
        raise ShapeMismatchError(f"backbone expects N x {expected[0]} x {expected[1]} x {expected[2]}, got {image.shape}")
    x = image
    for stage in params:
        x = relu(conv2d(x, stage))
    return x


def backbone_parameters(params: List[Conv2dParams], prefix: str = "backbone") -> Dict[str, Tensor]:
    registry: Dict[str, Tensor] = {}
    for idx, stage in enumerate(params):
        registry[f"{prefix}.stage{idx}.kernel"] = stage.kernel
        registry[f"{prefix}.stage{idx}.bias"] = stage.bias
    return registry


def save_feature_file(path: Union[str, Path], features: np.ndarray) -> None:
    if features.ndim != 4:
        raise ShapeMismatchError(f"feature maps must be N x H x W x C, got shape {features.shape}")
    write_container(path, {FEATURE_ENTRY: features})


def load_feature_file(path: Union[str, Path]) -> Tensor:
    """Load externally computed F_enc; returned as a constant (no gradient)."""
    entries = read_container(path)
    if FEATURE_ENTRY not in entries:
        raise CorruptContainerError(f"{path}: no '{FEATURE_ENTRY}' entry in container")
    features = entries[FEATURE_ENTRY]
    if features.ndim != 4:
        raise ShapeMismatchError(f"{path}: feature map rank must be 4, got {features.ndim}")
    logger.info(f"Loaded feature map {features.shape} from {path}")
    return Tensor(features.astype(np.float64))
