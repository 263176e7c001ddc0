"""
Run configuration: a flat ``key = value`` file (UTF-8, ``#`` comments) parsed into
``RunConfig`` and split into the model, augmentation and training sub-configs.

Example::

    data_root = data/smoke
    image_height = 32
    image_width = 32
    backbone_widths = 8, 16
    backbone_strides = 2, 2
    epochs = 300
"""
import logging
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from src.data.dataset import AugmentConfig
from src.error_handling import ConfigError
from src.model.attention import FcssamConfig
from src.model.backbone import BackboneConfig
from src.model.fanet import ModelConfig
from src.train.trainer import TrainConfig

logger = logging.getLogger(__name__)

LOG_LEVEL_ENV = "FANET_LOG_LEVEL"
LIST_KEYS = {"backbone_widths", "backbone_strides"}
NONE_VALUES = {"", "none", "null"}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data_root: Path
    output_dir: Path = Path("runs/latest")
    validation_fraction: float = 0.10

    image_height: int = 64
    image_width: int = 64
    backbone_widths: List[int] = [16, 32, 64]
    backbone_strides: List[int] = [2, 2, 2]

    reduction_ratio: int = 16
    retention: float = 0.8
    wiring: Literal["cam_first", "cam_post"] = "cam_first"
    gate_form: Literal["richards", "logistic"] = "richards"
    sc_activation: Literal["relu", "none"] = "relu"
    share_cam_dense: bool = True
    share_sc: bool = False
    variant: Literal["cam", "sam", "sam_cam", "sam_fcs", "cssam", "fcssam"] = "fcssam"

    augment: bool = True
    rotation_range: float = 15.0
    shift_range: float = 0.10
    zoom_range: float = 0.10
    flip_probability: float = 0.5

    learning_rate: float = 1e-4
    batch_size: int = 48
    epochs: int = 50
    seed: int = 0
    checkpoint_every: int = 0
    patience: Optional[int] = None
    restore_best: bool = True
    grad_clip: Optional[float] = None
    class_weighting: bool = False
    checkpoint_dtype: Literal["float64", "float32"] = "float64"
    prefetch: int = 2
    show_progress: bool = False

    @field_validator("validation_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError(f"validation_fraction must lie in (0, 1), got {v}")
        return v

    @model_validator(mode="after")
    def _sub_configs(self) -> "RunConfig":
        # sub-config errors surface at parse time
        self.model_config_for(2)
        self.augment_config()
        self.train_config()
        return self

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            widths=self.backbone_widths,
            strides=self.backbone_strides,
            input_height=self.image_height,
            input_width=self.image_width,
        )

    def model_config_for(self, num_classes: int) -> ModelConfig:
        backbone = self.backbone_config()
        fcssam = FcssamConfig(
            channels=backbone.output_channels,
            reduction_ratio=self.reduction_ratio,
            retention=self.retention,
            wiring=self.wiring,
            gate_form=self.gate_form,
            sc_activation=self.sc_activation,
            share_cam_dense=self.share_cam_dense,
            share_sc=self.share_sc,
            variant=self.variant,
        )
        return ModelConfig(backbone=backbone, fcssam=fcssam, num_classes=num_classes)

    def augment_config(self) -> Optional[AugmentConfig]:
        if not self.augment:
            return None
        return AugmentConfig(
            rotation_range=self.rotation_range,
            shift_range=self.shift_range,
            zoom_range=self.zoom_range,
            flip_probability=self.flip_probability,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            seed=self.seed,
            checkpoint_every=self.checkpoint_every,
            patience=self.patience,
            restore_best=self.restore_best,
            grad_clip=self.grad_clip,
            class_weighting=self.class_weighting,
            prefetch=self.prefetch,
            show_progress=self.show_progress,
            checkpoint_dtype=self.checkpoint_dtype,
        )

    @property
    def image_size(self):
        return self.image_height, self.image_width


def _parse_lines(text: str, source: str) -> Dict[str, tuple]:
    values: Dict[str, tuple] = {}
    known = set(RunConfig.model_fields)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' (first set on line {values[key][1]})")
        values[key] = (value, lineno)
    return values


def _convert(key: str, value: str) -> Union[str, List[str], None]:
    if key in LIST_KEYS:
        return [item.strip() for item in value.split(",") if item.strip()]
    if value.lower() in NONE_VALUES:
        return None
    return value


def parse_run_config(text: str, source: str = "<config>", base_dir: Optional[Path] = None) -> RunConfig:
    """
    Parse and validate a run config. Relative paths resolve against ``base_dir``.

    Raises:
        ConfigError: naming the line of the unknown, duplicate or invalid key.
    """
    raw = _parse_lines(text, source)
    values = {key: _convert(key, value) for key, (value, _) in raw.items()}
    values = {key: value for key, value in values.items() if value is not None}
    if "data_root" not in values:
        raise ConfigError(f"{source}: required key 'data_root' is missing")
    try:
        cfg = RunConfig.model_validate(values)
    except ValidationError as e:
        problems = []
        for err in e.errors():
            key = str(err["loc"][0]) if err["loc"] else ""
            where = f"line {raw[key][1]}" if key in raw else "config"
            problems.append(f"{where}: {key or 'value'}: {err['msg']}")
        raise ConfigError(f"{source}: " + "; ".join(problems)) from e

    if base_dir is not None:
        if not cfg.data_root.is_absolute():
            cfg.data_root = base_dir / cfg.data_root
        if not cfg.output_dir.is_absolute():
            cfg.output_dir = base_dir / cfg.output_dir
    return cfg


def load_run_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    cfg = parse_run_config(text, str(path), base_dir=path.parent)
    logger.info(f"Loaded run config from {path}")
    return cfg


def log_level_from_env(default: str = "INFO") -> str:
    return os.getenv(LOG_LEVEL_ENV, default).upper()
