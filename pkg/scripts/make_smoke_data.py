#!/usr/bin/env python
"""Create data/smoke (32 synthetic images, two classes) for configs/smoke.conf."""
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from src.data.synthetic import make_synthetic_dataset  # noqa: E402

if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "data" / "smoke"
    make_synthetic_dataset(target, per_class=16, size=32, seed=0)
    print(f"wrote {target}")
