import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, field_validator
from tqdm import tqdm

from src.autograd.tensor import Tape, Tensor, backward, record
from src.data.dataset import AugmentConfig, Batch, DatasetIndex, batch_iter
from src.error_handling import DataError, NumericalError
from src.model.fanet import FaNet
from src.model.model_metrics import record_epoch, track_step_time
from src.train.checkpoint import load_checkpoint, save_checkpoint
from src.train.optim import AdamState, adam_step

logger = logging.getLogger(__name__)

BEST_CHECKPOINT = "best.fant"
LAST_CHECKPOINT = "last.fant"
LOG_FILE = "training_log.csv"
LOG_COLUMNS = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc"]


class TrainConfig(BaseModel):
    epochs: int = 50
    batch_size: int = 48
    learning_rate: float = 1e-4
    seed: int = 0
    checkpoint_every: int = 0  # 0: only best and last
    patience: Optional[int] = None
    restore_best: bool = True
    grad_clip: Optional[float] = None
    class_weighting: bool = False
    prefetch: int = 2
    show_progress: bool = False
    checkpoint_dtype: Literal["float64", "float32"] = "float64"

    @field_validator("epochs", "batch_size")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError(f"must be positive, got {v}")
        return v

    @field_validator("learning_rate")
    @classmethod
    def _lr(cls, v: float) -> float:
        if v < 0 or not math.isfinite(v):
            raise ValueError(f"learning rate must be finite and non-negative, got {v}")
        return v

    @field_validator("checkpoint_every", "prefetch")
    @classmethod
    def _non_negative(cls, v: int) -> int:
        if v < 0:
            raise ValueError(f"must be non-negative, got {v}")
        return v

    @field_validator("patience")
    @classmethod
    def _patience(cls, v: Optional[int]) -> Optional[int]:
        if v is not None and v < 1:
            raise ValueError(f"patience must be positive, got {v}")
        return v


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingLog:
    records: List[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> Optional[int]:
        if not self.records:
            return None
        return min(self.records, key=lambda r: r.val_loss).epoch

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=LOG_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "TrainingLog":
        frame = pd.read_csv(path)
        return cls([EpochRecord(int(r.epoch), r.train_loss, r.train_acc, r.val_loss, r.val_acc) for r in frame.itertuples()])


def cross_entropy_loss(logits: Tensor, labels: Sequence[int], class_weights: Optional[np.ndarray] = None) -> Tensor:
    """
    Mean negative log-likelihood of ``labels`` under softmax(``logits``), computed
    with a fused max-subtracted log-softmax. With ``class_weights`` the mean is
    weighted by the weight of each sample's label.
    """
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    weights = np.ones(n) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[labels]
    normalized = weights / weights.sum()
    loss = -(normalized * log_probs[rows, labels]).sum()

    def backward_fn(g):
        d = np.exp(log_probs)
        d[rows, labels] -= 1.0
        return (g * d * normalized[:, None],)

    return record("cross_entropy", np.array(loss), (logits,), backward_fn)


def inverse_frequency_weights(index: DatasetIndex) -> np.ndarray:
    counts = index.class_counts().astype(np.float64)
    weights = np.where(counts > 0, counts.sum() / (len(counts) * np.maximum(counts, 1)), 0.0)
    return weights


@track_step_time
def train_step(
    model: FaNet,
    params: Dict[str, Tensor],
    batch: Batch,
    state: AdamState,
    class_weights: Optional[np.ndarray] = None,
    grad_clip: Optional[float] = None,
) -> Tuple[float, np.ndarray]:
    """One forward/backward/update; returns (loss, logits)."""
    model.zero_grad()
    with Tape():
        logits = model(batch.images)
        loss = cross_entropy_loss(logits, batch.labels, class_weights)
    backward(loss)
    adam_step(params, state, grad_clip)
    return loss.item(), logits.data


def evaluate_loss(
    model: FaNet,
    index: DatasetIndex,
    batch_size: int,
    size: Tuple[int, int],
    prefetch: int = 2,
) -> Tuple[float, float]:
    """Sample-weighted mean loss and accuracy without recording a tape."""
    total_loss, correct, seen = 0.0, 0, 0
    for batch in batch_iter(index, batch_size, None, size, prefetch=prefetch):
        logits = model(batch.images)
        total_loss += cross_entropy_loss(logits, batch.labels).item() * len(batch.labels)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
        seen += len(batch.labels)
    return total_loss / seen, correct / seen


def fit(
    model: FaNet,
    train_index: DatasetIndex,
    val_index: DatasetIndex,
    cfg: TrainConfig,
    size: Tuple[int, int],
    augment_cfg: Optional[AugmentConfig] = None,
    output_dir: Optional[Path] = None,
    optimizer_state: Optional[AdamState] = None,
    start_epoch: int = 0,
    best_val_loss: float = float("inf"),
    stale_epochs: int = 0,
) -> TrainingLog:
    """
    Train with Adam on cross-entropy, validating after every epoch.

    The best-validation-loss weights are written to ``best.fant`` and the latest
    weights with optimizer state to ``last.fant`` (for ``--resume``); the
    per-epoch log goes to ``training_log.csv``. With ``restore_best`` the model
    ends holding the best weights.
    """
    if len(train_index) == 0 or len(val_index) == 0:
        raise DataError("training and validation indices must be non-empty")

    state = optimizer_state or AdamState(lr=cfg.learning_rate)
    params = model.trainable_parameters()
    class_weights = inverse_frequency_weights(train_index) if cfg.class_weighting else None
    class_names = train_index.class_names
    dtype = np.float32 if cfg.checkpoint_dtype == "float32" else None
    log = TrainingLog()
    if output_dir is not None and start_epoch > 0 and (output_dir / LOG_FILE).exists():
        log = TrainingLog([r for r in TrainingLog.from_csv(output_dir / LOG_FILE).records if r.epoch < start_epoch])
    best_state = model.state_dict() if start_epoch == 0 else None
    if best_state is None and output_dir is not None and (output_dir / BEST_CHECKPOINT).exists():
        best_state = load_checkpoint(output_dir / BEST_CHECKPOINT).model.state_dict()

    for epoch in range(start_epoch, cfg.epochs):
        total_loss, correct, seen = 0.0, 0, 0
        batches = batch_iter(train_index, cfg.batch_size, cfg.seed, size, epoch, augment_cfg, cfg.prefetch)
        for batch_idx, batch in enumerate(tqdm(batches, desc=f"epoch {epoch}", disable=not cfg.show_progress, leave=False)):
            try:
                loss, logits = train_step(model, params, batch, state, class_weights, cfg.grad_clip)
            except NumericalError as e:
                first = batch.paths[0] if batch.paths else "?"
                raise NumericalError(
                    f"non-finite values at epoch {epoch}, batch {batch_idx} (first sample {first}): {e}"
                ) from e
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {batch_idx}")
            total_loss += loss * len(batch.labels)
            correct += int((logits.argmax(axis=1) == batch.labels).sum())
            seen += len(batch.labels)

        val_loss, val_acc = evaluate_loss(model, val_index, cfg.batch_size, size, cfg.prefetch)
        entry = EpochRecord(epoch, total_loss / seen, correct / seen, val_loss, val_acc)
        log.records.append(entry)
        record_epoch("train", entry.train_loss, entry.train_acc, seen)
        record_epoch("val", val_loss, val_acc, len(val_index))
        logger.info(
            f"epoch {epoch}: train_loss={entry.train_loss:.6f} train_acc={entry.train_acc:.4f} "
            f"val_loss={val_loss:.6f} val_acc={val_acc:.4f}"
        )

        if val_loss < best_val_loss:
            best_val_loss, stale_epochs = val_loss, 0
            best_state = model.state_dict()
            if output_dir is not None:
                save_checkpoint(model, None, output_dir / BEST_CHECKPOINT, epoch, class_names, best_val_loss, dtype=dtype)
        else:
            stale_epochs += 1

        if output_dir is not None:
            save_checkpoint(model, state, output_dir / LAST_CHECKPOINT, epoch, class_names, best_val_loss, stale_epochs, dtype=dtype)
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, output_dir / f"epoch_{epoch:04d}.fant", epoch, class_names, best_val_loss, stale_epochs, dtype=dtype)
            log.to_csv(output_dir / LOG_FILE)

        if cfg.patience is not None and stale_epochs >= cfg.patience:
            logger.info(f"Early stopping after epoch {epoch}: no validation improvement for {stale_epochs} epochs")
            break

    if cfg.restore_best and best_state is not None:
        model.load_state_dict(best_state)
    return log
