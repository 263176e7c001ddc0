import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from src.autograd.tensor import Tensor
from src.error_handling import ShapeMismatchError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, grad_clip: Optional[float] = None) -> None:
    """
    Bias-corrected Adam update applied in place to every tensor in ``params``.

    A parameter without a gradient is treated as having a zero gradient.
    ``grad_clip`` rescales all gradients so their global L2 norm does not exceed it.
    """
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeMismatchError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        grads[name] = g

    if grad_clip is not None:
        norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
        if norm > grad_clip:
            grads = {name: g * (grad_clip / norm) for name, g in grads.items()}

    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            if m is not None:
                raise ShapeMismatchError(f"optimizer moment for {name} has shape {m.shape}, parameter has {p.shape}")
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
