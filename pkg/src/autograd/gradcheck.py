import logging
from typing import Callable, Optional

import numpy as np

from src.autograd.tensor import Tape, Tensor, backward
from src.error_handling import ShapeMismatchError

logger = logging.getLogger(__name__)


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-5,
    floor: float = 1e-12,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> float:
    """
    Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    ``x`` is perturbed in place and restored, so it may be a model parameter that
    ``f`` reaches through a closure. Returns the maximum over checked elements of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    Args:
        f: Scalar-valued function of ``x``.
        x: Point of evaluation.
        eps: Central-difference step.
        floor: Denominator floor.
        max_elements: Check a seeded random subset of this many elements.
        seed: Seed for the subset.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")

    was_tracking, previous_grad = x.requires_grad, x.grad
    x.requires_grad, x.grad = True, None
    try:
        with Tape():
            out = f(x)
        if out.size != 1:
            raise ShapeMismatchError(f"gradient check needs a scalar function, got shape {out.shape}")
        if out.requires_grad:
            backward(out)
        analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    finally:
        x.requires_grad, x.grad = was_tracking, previous_grad

    flat = x.data.reshape(-1)
    if max_elements is not None and max_elements < flat.size:
        indices = np.sort(np.random.default_rng(seed).choice(flat.size, size=max_elements, replace=False))
    else:
        indices = np.arange(flat.size)

    analytic_flat = analytic.reshape(-1)
    worst = 0.0
    for i in indices:
        original = flat[i]
        flat[i] = original + eps
        plus = f(x).item()
        flat[i] = original - eps
        minus = f(x).item()
        flat[i] = original
        numeric = (plus - minus) / (2.0 * eps)
        a = float(analytic_flat[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        worst = max(worst, err)
    return worst
