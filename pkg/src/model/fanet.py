"""FA-Net assembly: backbone -> FCSSAM -> global average pooling -> dense classifier."""
import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from src.autograd.tensor import Tensor
from src.error_handling import IncompatibleCheckpointError, ShapeMismatchError
from src.model.attention import (
    FcssamConfig,
    FcssamDiagnostics,
    FcssamParams,
    fcssam_forward,
    fcssam_parameters,
    init_fcssam,
)
from src.model.backbone import BackboneConfig, backbone_forward, backbone_parameters, init_backbone
from src.model.nn_ops import Conv2dParams, DenseParams, dense, global_pool, init_dense, softmax

logger = logging.getLogger(__name__)


class ModelConfig(BaseModel):
    """Architecture. ``backbone = None`` means inputs are precomputed F_enc maps."""

    backbone: Optional[BackboneConfig] = BackboneConfig()
    fcssam: FcssamConfig
    num_classes: int = 2

    @field_validator("num_classes")
    @classmethod
    def _classes(cls, v: int) -> int:
        if v < 2:
            raise ValueError(f"num_classes must be at least 2, got {v}")
        return v

    @model_validator(mode="after")
    def _channels_agree(self) -> "ModelConfig":
        if self.backbone is not None and self.backbone.output_channels != self.fcssam.channels:
            raise ValueError(
                f"backbone emits C={self.backbone.output_channels} but FCSSAM is configured for C={self.fcssam.channels}"
            )
        return self


@dataclass
class Prediction:
    labels: np.ndarray  # N
    probabilities: np.ndarray  # N x K


@dataclass
class AttentionDiagnostics:
    cam_weights: Optional[np.ndarray]  # C
    sam_avg_map: Optional[np.ndarray]  # H x W, min-max normalized
    sam_max_map: Optional[np.ndarray]  # H x W, min-max normalized
    gate_values: Optional[np.ndarray]  # 2C
    selected_indices: Optional[np.ndarray]  # m, ascending


class FaNet:
    def __init__(
        self,
        config: ModelConfig,
        backbone: Optional[List[Conv2dParams]],
        fcssam: FcssamParams,
        head: DenseParams,
    ):
        self.config = config
        self.backbone = backbone
        self.fcssam = fcssam
        self.head = head
        self._registry = self._build_registry()

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "FaNet":
        rng = np.random.default_rng(seed)
        backbone = init_backbone(config.backbone, rng) if config.backbone is not None else None
        fcssam = init_fcssam(config.fcssam, rng)
        head = init_dense(rng, config.fcssam.output_channels, config.num_classes)
        return cls(config, backbone, fcssam, head)

    def _build_registry(self) -> Dict[str, Tensor]:
        registry: Dict[str, Tensor] = {}
        if self.backbone is not None:
            registry.update(backbone_parameters(self.backbone))
        registry.update(fcssam_parameters(self.fcssam))
        registry["head.weight"] = self.head.weight
        registry["head.bias"] = self.head.bias
        return registry

    def parameters(self) -> Dict[str, Tensor]:
        return dict(self._registry)

    def trainable_parameters(self) -> Dict[str, Tensor]:
        return {name: t for name, t in self._registry.items() if t.requires_grad}

    def zero_grad(self) -> None:
        for tensor in self._registry.values():
            tensor.zero_grad()

    def encode(self, images: Tensor) -> Tensor:
        if self.backbone is None:
            return images
        return backbone_forward(images, self.config.backbone, self.backbone)

    def forward_with_diagnostics(self, images: Tensor) -> Tuple[Tensor, Tensor, FcssamDiagnostics]:
        """Returns (logits, GAP features, FCSSAM diagnostics)."""
        attended, diagnostics = fcssam_forward(self.encode(images), self.fcssam)
        gap = global_pool(attended, "avg")
        return dense(gap, self.head), gap, diagnostics

    def __call__(self, images: Tensor) -> Tensor:
        return self.forward_with_diagnostics(images)[0]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._registry.items()}

    def load_state_dict(self, entries: Mapping[str, np.ndarray]) -> None:
        """Copy values in by name; every registered parameter must be present with its shape."""
        problems = []
        for name, tensor in self._registry.items():
            if name not in entries:
                problems.append(f"missing parameter {name}")
            elif tuple(entries[name].shape) != tensor.shape:
                problems.append(f"{name}: checkpoint shape {tuple(entries[name].shape)} != model shape {tensor.shape}")
        if problems:
            raise IncompatibleCheckpointError("incompatible checkpoint: " + "; ".join(problems))
        for name, tensor in self._registry.items():
            tensor.data = np.array(entries[name], dtype=np.float64)


def forward(model: FaNet, images: Tensor) -> Tensor:
    """Logits N x K (softmax is applied only inside the loss and in predict)."""
    return model(images)


def predict(model: FaNet, images: Tensor) -> Prediction:
    probabilities = softmax(forward(model, images)).data
    return Prediction(labels=probabilities.argmax(axis=1), probabilities=probabilities)


def extract_gap_features(model: FaNet, images: Tensor) -> Tensor:
    return model.forward_with_diagnostics(images)[1]


def _min_max(values: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if values is None:
        return None
    low, high = values.min(), values.max()
    if high - low <= 0:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def extract_attention_diagnostics(model: FaNet, image: Tensor) -> AttentionDiagnostics:
    if image.ndim == 3:
        image = Tensor(image.data[None])
    if image.shape[0] != 1:
        raise ShapeMismatchError(f"attention diagnostics take a single image, got batch of {image.shape[0]}")
    _, _, diag = model.forward_with_diagnostics(image)
    return AttentionDiagnostics(
        cam_weights=None if diag.cam_weights is None else diag.cam_weights[0],
        sam_avg_map=_min_max(None if diag.sam_avg_map is None else diag.sam_avg_map[0]),
        sam_max_map=_min_max(None if diag.sam_max_map is None else diag.sam_max_map[0]),
        gate_values=diag.gate_values,
        selected_indices=diag.selected_indices,
    )
