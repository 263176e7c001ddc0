"""Deterministic two-class image set for smoke runs: dark vs bright noise."""
import logging
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

CLASS_LEVELS = {"bright": 0.8, "dark": 0.2}


def make_synthetic_dataset(
    root: Union[str, Path],
    per_class: int = 16,
    size: int = 32,
    seed: int = 0,
    noise: float = 0.05,
    classes: Sequence[str] = ("bright", "dark"),
) -> Path:
    """Write ``per_class`` grayscale PNGs per class under ``root/<class>/``."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    for name in classes:
        class_dir = root / name
        class_dir.mkdir(parents=True, exist_ok=True)
        level = CLASS_LEVELS.get(name, rng.uniform(0.2, 0.8))
        for i in range(per_class):
            pixels = np.clip(level + rng.uniform(-noise, noise, size=(size, size)), 0.0, 1.0)
            Image.fromarray(np.round(pixels * 255).astype(np.uint8), mode="L").save(class_dir / f"{name}_{i:03d}.png")
    logger.info(f"Wrote {per_class * len(classes)} synthetic images to {root}")
    return root
