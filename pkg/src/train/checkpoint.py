"""
Checkpoints: parameters and optimizer state in a FANT container plus a JSON
sidecar (``<checkpoint>.json``) holding the architecture and class names.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from pydantic import ValidationError

from src.error_handling import IncompatibleCheckpointError
from src.model.fanet import FaNet, ModelConfig
from src.storage.container import read_container, write_container
from src.train.optim import AdamState

logger = logging.getLogger(__name__)

PARAM_PREFIX = "param/"
M_PREFIX = "optim/m/"
V_PREFIX = "optim/v/"


@dataclass
class CheckpointBundle:
    model: FaNet
    optimizer: Optional[AdamState]
    epoch: int = -1
    best_val_loss: float = float("inf")
    stale_epochs: int = 0
    class_names: List[str] = field(default_factory=list)


def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_checkpoint(
    model: FaNet,
    optimizer: Optional[AdamState],
    path: Union[str, Path],
    epoch: int = -1,
    class_names: Optional[List[str]] = None,
    best_val_loss: float = float("inf"),
    stale_epochs: int = 0,
    dtype: Optional[np.dtype] = None,
) -> None:
    """Write parameters (and optimizer moments). ``dtype=np.float32`` halves the size but is lossy."""
    entries = {PARAM_PREFIX + name: array for name, array in model.state_dict().items()}
    if optimizer is not None:
        for name in optimizer.m:
            entries[M_PREFIX + name] = optimizer.m[name]
            entries[V_PREFIX + name] = optimizer.v[name]
        entries["optim/t"] = np.array([optimizer.t], dtype=np.float64)
        entries["optim/hyper"] = np.array([optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps])
    entries["meta/epoch"] = np.array([epoch], dtype=np.float64)
    entries["meta/best_val_loss"] = np.array([best_val_loss])
    entries["meta/stale_epochs"] = np.array([stale_epochs], dtype=np.float64)
    if dtype is not None and np.dtype(dtype) == np.float32:
        logger.warning("Saving checkpoint at float32: parameters lose precision")

    path = Path(path)
    write_container(path, entries, dtype=dtype)
    sidecar = {"model": model.config.model_dump(mode="json"), "class_names": list(class_names or [])}
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info(f"Saved checkpoint to {path}")


def read_sidecar(path: Union[str, Path]) -> dict:
    side = sidecar_path(path)
    if not side.exists():
        raise IncompatibleCheckpointError(f"{path}: architecture sidecar {side.name} not found")
    try:
        payload = json.loads(side.read_text(encoding="utf-8"))
        payload["model"] = ModelConfig.model_validate(payload["model"])
    except (json.JSONDecodeError, KeyError, ValidationError) as e:
        raise IncompatibleCheckpointError(f"{side}: unreadable architecture sidecar ({e})") from e
    return payload


def load_checkpoint(path: Union[str, Path], model: Optional[FaNet] = None) -> CheckpointBundle:
    """
    Load parameters into ``model`` (or into a model rebuilt from the sidecar).

    Raises:
        CorruptContainerError: bad magic, version or CRC.
        IncompatibleCheckpointError: parameter names or shapes do not match.
    """
    entries = read_container(path)
    class_names: List[str] = []
    if model is None:
        sidecar = read_sidecar(path)
        model = FaNet.build(sidecar["model"])
        class_names = sidecar["class_names"]
    elif sidecar_path(path).exists():
        class_names = read_sidecar(path)["class_names"]

    params = {name[len(PARAM_PREFIX):]: value for name, value in entries.items() if name.startswith(PARAM_PREFIX)}
    model.load_state_dict(params)

    optimizer = None
    if "optim/t" in entries:
        lr, beta1, beta2, eps = entries["optim/hyper"].tolist()
        optimizer = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps, t=int(entries["optim/t"][0]))
        for name, value in entries.items():
            if name.startswith(M_PREFIX):
                optimizer.m[name[len(M_PREFIX):]] = value.astype(np.float64)
            elif name.startswith(V_PREFIX):
                optimizer.v[name[len(V_PREFIX):]] = value.astype(np.float64)

    return CheckpointBundle(
        model=model,
        optimizer=optimizer,
        epoch=int(entries.get("meta/epoch", np.array([-1]))[0]),
        best_val_loss=float(entries.get("meta/best_val_loss", np.array([np.inf]))[0]),
        stale_epochs=int(entries.get("meta/stale_epochs", np.array([0]))[0]),
        class_names=class_names,
    )
