"""
Dataset ingestion: class-per-directory indexing, stratified validation split,
image decoding and resizing, on-the-fly augmentation, prefetching batch iterator.

Layout: ``root/<ClassName>/*.{png,jpg,jpeg,pgm}``.
"""
import logging
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from threading import Lock
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from cachetools import LRUCache, cached
from PIL import Image, UnidentifiedImageError
from pydantic import BaseModel, field_validator

from src.autograd.tensor import Tensor
from src.error_handling import ConfigError, DataError

logger = logging.getLogger(__name__)

SUPPORTED_EXTENSIONS = (".png", ".jpg", ".jpeg", ".pgm")
DECODE_CACHE_BYTES = 512 * 1024 * 1024


@dataclass(frozen=True)
class Sample:
    path: Path
    label: int


@dataclass
class DatasetIndex:
    samples: List[Sample]
    class_names: List[str]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)


class AugmentConfig(BaseModel):
    rotation_range: float = 15.0  # degrees, +/-
    shift_range: float = 0.10  # fraction of extent, +/-
    flip_probability: float = 0.5
    zoom_range: float = 0.10  # fraction, +/-
    seed: int = 0

    @field_validator("rotation_range", "shift_range", "zoom_range")
    @classmethod
    def _non_negative(cls, v: float) -> float:
        if v < 0:
            raise ValueError(f"augmentation ranges must be non-negative, got {v}")
        return v

    @field_validator("zoom_range")
    @classmethod
    def _zoom_below_one(cls, v: float) -> float:
        if v >= 1:
            raise ValueError(f"zoom_range must be below 1, got {v}")
        return v

    @field_validator("flip_probability")
    @classmethod
    def _probability(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError(f"flip_probability must lie in [0, 1], got {v}")
        return v


@dataclass
class Batch:
    images: Tensor  # N x H x W x 3
    labels: np.ndarray  # N
    paths: List[Path] = field(default_factory=list)


def index_dataset(root: Union[str, Path], split: str = "train") -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    class_dirs = sorted((d for d in root.iterdir() if d.is_dir()), key=lambda d: d.name)
    if not class_dirs:
        raise DataError(f"no class directories under {root}")

    samples = []
    for label, class_dir in enumerate(class_dirs):
        files = [f for f in class_dir.iterdir() if f.is_file() and f.suffix.lower() in SUPPORTED_EXTENSIONS]
        if not files:
            logger.warning(f"Class directory {class_dir} contains no supported images")
        samples.extend(Sample(f, label) for f in files)
    samples.sort(key=lambda s: str(s.path))
    index = DatasetIndex(samples, [d.name for d in class_dirs], split)
    logger.info(f"Indexed {len(index)} samples in {index.num_classes} classes under {root}")
    return index


def split_validation(index: DatasetIndex, fraction: float, seed: int) -> Tuple[DatasetIndex, DatasetIndex]:
    """
    Stratified split: per class, seeded shuffle then cut round(fraction * count) for validation.

    Every class keeps at least one validation and one training sample, so the
    validation count is clamped to [1, count - 1]; a class of 2 always splits 1 / 1
    whatever the fraction.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"validation fraction must lie in (0, 1), got {fraction}")

    val_positions = set()
    for label, name in enumerate(index.class_names):
        members = [i for i, s in enumerate(index.samples) if s.label == label]
        if len(members) < 2:
            raise DataError(f"class '{name}' has {len(members)} sample(s); at least 2 are needed to split")
        n_val = min(max(1, int(np.floor(fraction * len(members) + 0.5))), len(members) - 1)
        rng = np.random.default_rng([seed, label])
        val_positions.update(rng.permutation(members)[:n_val].tolist())

    train = [s for i, s in enumerate(index.samples) if i not in val_positions]
    val = [s for i, s in enumerate(index.samples) if i in val_positions]
    return DatasetIndex(train, list(index.class_names), "train"), DatasetIndex(val, list(index.class_names), "val")


def export_split_manifest(indices: Sequence[DatasetIndex], path: Union[str, Path], root: Optional[Path] = None) -> None:
    rows = []
    for index in indices:
        for s in index.samples:
            rel = s.path.relative_to(root) if root is not None else s.path
            rows.append({"path": rel.as_posix(), "class": index.class_names[s.label], "split": index.split})
    pd.DataFrame(rows, columns=["path", "class", "split"]).to_csv(path, index=False)


def read_split_manifest(path: Union[str, Path], class_names: List[str], split: str, root: Optional[Path] = None) -> DatasetIndex:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError) as e:
        raise DataError(f"cannot read split manifest {path}: {e}") from e
    if list(frame.columns) != ["path", "class", "split"]:
        raise DataError(f"{path}: expected header path,class,split, got {','.join(frame.columns)}")
    samples = []
    for row in frame[frame["split"] == split].itertuples(index=False):
        if row[1] not in class_names:
            raise DataError(f"{path}: unknown class '{row[1]}'")
        sample_path = Path(row[0])
        if root is not None and not sample_path.is_absolute():
            sample_path = root / sample_path
        samples.append(Sample(sample_path, class_names.index(row[1])))
    if not samples:
        raise DataError(f"{path}: no rows for split '{split}'")
    return DatasetIndex(samples, list(class_names), split)


def _axis_sampling(out_n: int, in_n: int):
    src = np.clip((np.arange(out_n) + 0.5) * (in_n / out_n) - 0.5, 0, in_n - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_n - 1)
    return lo, hi, src - lo


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of H x W x C with half-pixel centers and edge clamping."""
    y0, y1, fy = _axis_sampling(height, image.shape[0])
    x0, x1, fx = _axis_sampling(width, image.shape[1])
    rows = image[y0] * (1 - fy)[:, None, None] + image[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def _decode(path: Path) -> np.ndarray:
    if path.suffix.lower() not in SUPPORTED_EXTENSIONS:
        raise DataError(f"unsupported image format: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            if img.mode in ("1", "LA"):
                img = img.convert("L")
            if img.mode == "L":
                gray = np.asarray(img, dtype=np.float64) / 255.0
            elif img.mode.startswith("I;16") or img.mode == "I":
                gray = np.clip(np.asarray(img, dtype=np.float64) / 65535.0, 0.0, 1.0)
            else:
                return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as e:
        raise DataError(f"cannot decode image {path}: {e}") from e
    return np.repeat(gray[:, :, None], 3, axis=2)


def _preprocess(path: Path, height: int, width: int) -> np.ndarray:
    image = _decode(path)
    if image.shape[:2] != (height, width):
        image = resize_bilinear(image, height, width)
    return np.clip(image, 0.0, 1.0)


@cached(cache=LRUCache(maxsize=DECODE_CACHE_BYTES, getsizeof=lambda a: a.nbytes), lock=Lock())
def _preprocess_cached(path: str, height: int, width: int) -> np.ndarray:
    image = _preprocess(Path(path), height, width)
    image.flags.writeable = False
    return image


def load_and_preprocess(path: Union[str, Path], size: Tuple[int, int]) -> Tensor:
    """Decode, replicate grayscale to 3 channels, bilinear-resize to ``size`` and scale to [0, 1]."""
    return Tensor(_preprocess(Path(path), size[0], size[1]))


def _sample_bilinear(image: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear lookup at fractional coordinates; outside pixels read as 0."""
    h, w, _ = image.shape
    y0, x0 = np.floor(ys).astype(np.int64), np.floor(xs).astype(np.int64)
    fy, fx = ys - y0, xs - x0
    out = np.zeros(ys.shape + image.shape[2:])
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            yy, xx = y0 + dy, x0 + dx
            valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            values = image[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            out += (wy * wx * valid)[..., None] * values
    return out


def affine_transform(
    image: np.ndarray,
    angle: float = 0.0,
    shift: Tuple[float, float] = (0.0, 0.0),
    zoom: float = 1.0,
    flip: bool = False,
) -> np.ndarray:
    """
    Rotate by ``angle`` degrees (counter-clockwise as displayed), translate by
    ``shift`` = (dx, dy) pixels, scale by ``zoom`` about the center, then mirror
    horizontally. One bilinear resample; uncovered pixels are 0.
    """
    h, w, _ = image.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    v, u = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    if flip:
        u = -u
    u, v = u / zoom, v / zoom
    u, v = u - shift[0], v - shift[1]
    theta = np.deg2rad(angle)
    cos, sin = np.cos(theta), np.sin(theta)
    src_u = u * cos - v * sin
    src_v = u * sin + v * cos
    return np.clip(_sample_bilinear(image, src_v + cy, src_u + cx), 0.0, 1.0)


def augment(image: Tensor, cfg: AugmentConfig, rng: np.random.Generator) -> Tensor:
    """Random rotation -> shift -> zoom -> horizontal flip; extents and [0, 1] range preserved."""
    data = image.data
    h, w = data.shape[:2]
    angle = rng.uniform(-cfg.rotation_range, cfg.rotation_range)
    dx = rng.uniform(-cfg.shift_range, cfg.shift_range) * w
    dy = rng.uniform(-cfg.shift_range, cfg.shift_range) * h
    zoom = rng.uniform(1.0 - cfg.zoom_range, 1.0 + cfg.zoom_range)
    flip = rng.random() < cfg.flip_probability
    return Tensor(affine_transform(data, angle, (dx, dy), zoom, flip))


def _make_batch(
    index: DatasetIndex,
    positions: np.ndarray,
    size: Tuple[int, int],
    augment_cfg: Optional[AugmentConfig],
    epoch: int,
    skip_errors: bool,
) -> Optional[Batch]:
    images, labels, paths = [], [], []
    for pos in positions:
        sample = index.samples[pos]
        try:
            image = _preprocess_cached(str(sample.path), size[0], size[1])
        except DataError as e:
            if not skip_errors:
                raise
            logger.warning(f"Skipping sample: {str(e)}")
            continue
        if augment_cfg is not None:
            rng = np.random.default_rng([augment_cfg.seed, epoch, int(pos)])
            image = augment(Tensor(image), augment_cfg, rng).data
        images.append(image)
        labels.append(sample.label)
        paths.append(sample.path)
    if not images:
        return None
    return Batch(Tensor(np.stack(images)), np.array(labels, dtype=np.int64), paths)


def batch_iter(
    index: DatasetIndex,
    batch_size: int,
    shuffle_seed: Optional[int],
    size: Tuple[int, int],
    epoch: int = 0,
    augment_cfg: Optional[AugmentConfig] = None,
    prefetch: int = 2,
    skip_errors: bool = False,
) -> Iterator[Batch]:
    """
    Yield batches in a seeded per-epoch order; the last partial batch is kept.

    Augmentation is applied only when ``index.split == "train"``. Batches are
    prepared by a worker thread up to ``prefetch`` batches ahead; per-sample
    augmentation RNGs are keyed by (seed, epoch, sample index), so results do
    not depend on the number of workers.
    """
    if len(index) == 0:
        raise DataError(f"cannot iterate an empty {index.split} index")
    if batch_size < 1:
        raise ConfigError(f"batch size must be at least 1, got {batch_size}")

    if shuffle_seed is None:
        order = np.arange(len(index))
    else:
        order = np.random.default_rng([shuffle_seed, epoch]).permutation(len(index))
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    active_augment = augment_cfg if index.split == "train" else None

    if prefetch < 1:
        for chunk in chunks:
            batch = _make_batch(index, chunk, size, active_augment, epoch, skip_errors)
            if batch is not None:
                yield batch
        return

    executor = ThreadPoolExecutor(max_workers=1)
    pending = deque()
    try:
        for chunk in chunks:
            pending.append(executor.submit(_make_batch, index, chunk, size, active_augment, epoch, skip_errors))
            if len(pending) > prefetch:
                batch = pending.popleft().result()
                if batch is not None:
                    yield batch
        while pending:
            batch = pending.popleft().result()
            if batch is not None:
                yield batch
    finally:
        executor.shutdown(wait=True, cancel_futures=True)
