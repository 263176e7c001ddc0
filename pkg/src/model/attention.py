"""
Fuzzy Channel Selective Spatial Attention (FCSSAM) and its components.

Wiring of the full block (``wiring = cam_first``)::

    f_rec      = f_enc * CAM(f_enc)                      channel recalibration
    branch_avg = SAM_avg(SC_avg(f_rec))                   H x W x C
    branch_max = SAM_max(SC_max(f_rec))                   H x W x C
    f_concat   = concat(branch_avg, branch_max)           H x W x 2C
    output     = FCS(f_concat)                            H x W x m

``wiring = cam_post`` feeds ``f_enc`` to both SC blocks and multiplies each SAM
output by the CAM weights instead.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, field_validator, model_validator

from src.autograd.tensor import Tensor, as_tensor, broadcast_axes, mul, record, reshape, take
from src.error_handling import ConfigError, NumericalError, ShapeMismatchError
from src.model.nn_ops import (
    Conv2dParams,
    DenseParams,
    SeparableConv2dParams,
    channelwise_pool,
    concat_channels,
    conv2d,
    dense,
    global_pool,
    glorot_uniform,
    init_dense,
    init_separable_conv2d,
    relu,
    separable_conv2d,
    sigmoid,
    stable_sigmoid,
)

logger = logging.getLogger(__name__)

Scalar = Union[Tensor, float]

# variant -> (uses CAM, uses SAM branches, uses channel selection)
VARIANTS: Dict[str, Tuple[bool, bool, bool]] = {
    "cam": (True, False, False),
    "sam": (False, True, False),
    "sam_cam": (True, True, False),
    "sam_fcs": (False, True, True),
    "cssam": (True, True, True),
    "fcssam": (True, True, True),
}


class FcssamConfig(BaseModel):
    channels: int
    reduction_ratio: int = 16
    retention: float = 0.8
    wiring: Literal["cam_first", "cam_post"] = "cam_first"
    gate_form: Literal["richards", "logistic"] = "richards"
    sc_activation: Literal["relu", "none"] = "relu"
    share_cam_dense: bool = True
    share_sc: bool = False
    variant: Literal["cam", "sam", "sam_cam", "sam_fcs", "cssam", "fcssam"] = "fcssam"

    @field_validator("retention")
    @classmethod
    def _retention_range(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError(f"retention k must lie in (0, 1], got {v}")
        return v

    @model_validator(mode="after")
    def _divisible(self) -> "FcssamConfig":
        if self.channels < 1 or self.reduction_ratio < 1:
            raise ValueError("channels and reduction_ratio must be positive")
        if self.uses_cam and self.channels % self.reduction_ratio != 0:
            raise ValueError(
                f"channels C={self.channels} must be divisible by reduction ratio r={self.reduction_ratio}"
            )
        return self

    @property
    def uses_cam(self) -> bool:
        return VARIANTS[self.variant][0]

    @property
    def uses_sam(self) -> bool:
        return VARIANTS[self.variant][1]

    @property
    def uses_fcs(self) -> bool:
        return VARIANTS[self.variant][2]

    @property
    def output_channels(self) -> int:
        if not self.uses_sam:
            return self.channels
        if self.uses_fcs:
            return retained_count(self.retention, 2 * self.channels)
        return 2 * self.channels


@dataclass
class CamParams:
    d1: DenseParams  # C -> C/r
    d2: DenseParams  # C/r -> C
    r: int
    d1_max: Optional[DenseParams] = None  # only when the GMP path is unshared
    d2_max: Optional[DenseParams] = None


@dataclass
class SamParams:
    conv: Conv2dParams  # 7 x 7 x 1 x 1, same padding


@dataclass
class FcsParams:
    alpha: Tensor  # 2C mask weights
    A: Tensor
    Q: Tensor
    mu: Tensor
    k: float
    form: str = "richards"


@dataclass
class FcssamParams:
    config: FcssamConfig
    cam: Optional[CamParams]
    sc_avg: Optional[Tuple[SeparableConv2dParams, SeparableConv2dParams]]
    sc_max: Optional[Tuple[SeparableConv2dParams, SeparableConv2dParams]]  # None when shared with sc_avg
    sam_avg: Optional[SamParams]
    sam_max: Optional[SamParams]
    fcs: Optional[FcsParams]


@dataclass
class FcssamDiagnostics:
    cam_weights: Optional[np.ndarray]  # N x C
    sam_avg_map: Optional[np.ndarray]  # N x H x W
    sam_max_map: Optional[np.ndarray]  # N x H x W
    gate_values: Optional[np.ndarray]  # 2C
    selected_indices: Optional[np.ndarray]  # m, ascending


def retained_count(k: float, channels: int) -> int:
    """m = max(1, round(k * M)), halves rounded up."""
    if not 0.0 < k <= 1.0:
        raise ConfigError(f"retention k must lie in (0, 1], got {k}")
    return max(1, int(np.floor(k * channels + 0.5)))


def channel_attention(f_enc: Tensor, p: CamParams) -> Tensor:
    """sigma(D2(ReLU(D1(GAP(F)))) + D2(ReLU(D1(GMP(F))))) -> N x C weights in (0, 1)."""
    c = f_enc.shape[3]
    if c % p.r != 0:
        raise ShapeMismatchError(f"channel attention: C={c} is not divisible by r={p.r}")
    if p.d1.weight.shape != (c, c // p.r):
        raise ShapeMismatchError(f"channel attention: D1 weight {p.d1.weight.shape} does not match C={c}, r={p.r}")
    d1_max = p.d1_max or p.d1
    d2_max = p.d2_max or p.d2
    ex_avg = dense(dense(global_pool(f_enc, "avg"), p.d1, "relu"), p.d2)
    ex_max = dense(dense(global_pool(f_enc, "max"), d1_max, "relu"), d2_max)
    return sigmoid(ex_avg + ex_max)


def spatial_attention_map(f: Tensor, p: SamParams, mode: str) -> Tensor:
    """sigma(conv7x7(channel pool(F))) -> N x H x W x 1."""
    return sigmoid(conv2d(channelwise_pool(f, mode), p.conv))


def spatial_attention(f: Tensor, p: SamParams, mode: str) -> Tensor:
    return mul(f, spatial_attention_map(f, p, mode))


# largest t passed to exp; the gate is 0 to double precision well before it
_LOG_GATE_LIMIT = 700.0


def _sum_to(grad: np.ndarray, like: Tensor, target: Tuple[int, ...]) -> np.ndarray:
    return grad.sum(axis=broadcast_axes(like.shape, target), keepdims=True).reshape(target)


def richards_gate(alpha: Tensor, A: Scalar, Q: Scalar, mu: Scalar, form: str = "richards") -> Tensor:
    """
    Richards gate ``1 / (1 + exp(A * exp(-Q * (alpha - mu))))``.

    ``form = "logistic"`` evaluates ``1 / (1 + A * exp(-Q * (alpha - mu)))``
    instead; both are increasing in alpha for A, Q > 0.

    Evaluated through ``t = log A - Q * (alpha - mu)``: the Richards form is
    ``sigmoid(-exp(t))`` and the logistic form ``sigmoid(-t)``, so alpha far
    from mu saturates to 1/2 (Richards) or 1 (logistic) and to 0 without overflow.
    """
    if form not in ("richards", "logistic"):
        raise ConfigError(f"Unknown gate form: {form}")
    A, Q, mu = as_tensor(A), as_tensor(Q), as_tensor(mu)
    for shape_param in (A, Q, mu):
        broadcast_axes(alpha.shape, shape_param.shape)
    if np.any(A.data <= 0):
        raise NumericalError(f"richards gate needs A > 0, got {A.data.ravel().tolist()}")
    offset = alpha.data - mu.data
    t = np.log(A.data) - Q.data * offset
    if form == "richards":
        inside = t < _LOG_GATE_LIMIT
        u = np.exp(np.minimum(t, _LOG_GATE_LIMIT))
        gate = stable_sigmoid(-u)
        dgate_dt = np.where(inside, -gate * (1.0 - gate) * u, 0.0)
    else:
        gate = stable_sigmoid(-t)
        dgate_dt = -gate * (1.0 - gate)

    def backward_fn(g):
        dt = g * dgate_dt
        return (
            -dt * Q.data,
            _sum_to(dt / A.data, alpha, A.shape),
            _sum_to(-dt * offset, alpha, Q.shape),
            _sum_to(dt * Q.data, alpha, mu.shape),
        )

    return record("richards_gate", gate, (alpha, A, Q, mu), backward_fn)


def select_top_channels(gates: np.ndarray, m: int) -> np.ndarray:
    """Indices of the m largest gates (ties to the lower index), returned ascending."""
    order = np.argsort(-gates, kind="stable")
    return np.sort(order[:m])


def _fuzzy_select(f: Tensor, p: FcsParams) -> Tuple[Tensor, Tensor, np.ndarray]:
    channels = f.shape[-1]
    if p.alpha.shape != (channels,):
        raise ShapeMismatchError(f"channel selection: alpha has shape {p.alpha.shape}, input has {channels} channels")
    m = retained_count(p.k, channels)
    gates = richards_gate(p.alpha, p.A, p.Q, p.mu, p.form)
    indices = select_top_channels(gates.data, m)
    return take(mul(f, gates), indices, axis=-1), gates, indices


def fuzzy_channel_select(f: Tensor, p: FcsParams) -> Tensor:
    """Keep the top-m gated channels in their original order, each scaled by its gate."""
    out, _, _ = _fuzzy_select(f, p)
    return out


def _sc_block(x: Tensor, pair: Tuple[SeparableConv2dParams, SeparableConv2dParams], activation: str) -> Tensor:
    for params in pair:
        x = separable_conv2d(x, params)
        if activation == "relu":
            x = relu(x)
    return x


def _channel_scale(f: Tensor, weights: Tensor) -> Tensor:
    n, c = weights.shape
    return mul(f, reshape(weights, (n, 1, 1, c)))


def fcssam_forward(f_enc: Tensor, p: FcssamParams) -> Tuple[Tensor, FcssamDiagnostics]:
    cfg = p.config
    if f_enc.ndim != 4 or f_enc.shape[3] != cfg.channels:
        raise ShapeMismatchError(f"FCSSAM expects N x H x W x {cfg.channels}, got {f_enc.shape}")

    cam_weights = channel_attention(f_enc, p.cam) if cfg.uses_cam else None
    diagnostics = FcssamDiagnostics(
        cam_weights=None if cam_weights is None else cam_weights.data.copy(),
        sam_avg_map=None,
        sam_max_map=None,
        gate_values=None,
        selected_indices=None,
    )

    pre_branch = f_enc
    if cam_weights is not None and (cfg.wiring == "cam_first" or not cfg.uses_sam):
        pre_branch = _channel_scale(f_enc, cam_weights)
    if not cfg.uses_sam:
        return pre_branch, diagnostics

    sc_max = p.sc_max if p.sc_max is not None else p.sc_avg
    x_avg = _sc_block(pre_branch, p.sc_avg, cfg.sc_activation)
    x_max = _sc_block(pre_branch, sc_max, cfg.sc_activation)
    map_avg = spatial_attention_map(x_avg, p.sam_avg, "avg")
    map_max = spatial_attention_map(x_max, p.sam_max, "max")
    branch_avg = mul(x_avg, map_avg)
    branch_max = mul(x_max, map_max)
    if cam_weights is not None and cfg.wiring == "cam_post":
        branch_avg = _channel_scale(branch_avg, cam_weights)
        branch_max = _channel_scale(branch_max, cam_weights)
    diagnostics.sam_avg_map = map_avg.data[..., 0].copy()
    diagnostics.sam_max_map = map_max.data[..., 0].copy()

    f_concat = concat_channels(branch_avg, branch_max)
    if not cfg.uses_fcs:
        return f_concat, diagnostics

    out, gates, indices = _fuzzy_select(f_concat, p.fcs)
    diagnostics.gate_values = gates.data.copy()
    diagnostics.selected_indices = indices
    return out, diagnostics


def _init_sam(rng: np.random.Generator) -> SamParams:
    kernel = glorot_uniform(rng, (7, 7, 1, 1), 49, 49)
    return SamParams(Conv2dParams(Tensor.parameter(kernel), Tensor.parameter(np.zeros(1))))


def init_fcssam(cfg: FcssamConfig, rng: np.random.Generator) -> FcssamParams:
    """Glorot-uniform weights, zero biases, alpha ~ U(0.4, 0.6), A = Q = 1, mu = 0.5."""
    c = cfg.channels
    cam = None
    if cfg.uses_cam:
        hidden = c // cfg.reduction_ratio
        cam = CamParams(init_dense(rng, c, hidden), init_dense(rng, hidden, c), cfg.reduction_ratio)
        if not cfg.share_cam_dense:
            cam.d1_max = init_dense(rng, c, hidden)
            cam.d2_max = init_dense(rng, hidden, c)

    sc_avg = sc_max = sam_avg = sam_max = fcs = None
    if cfg.uses_sam:
        sc_avg = (init_separable_conv2d(rng, 1, c, c), init_separable_conv2d(rng, 3, c, c))
        if not cfg.share_sc:
            sc_max = (init_separable_conv2d(rng, 1, c, c), init_separable_conv2d(rng, 3, c, c))
        sam_avg = _init_sam(rng)
        sam_max = _init_sam(rng)

    if cfg.uses_fcs:
        trainable_gate = cfg.variant != "cssam"
        fcs = FcsParams(
            alpha=Tensor.parameter(rng.uniform(0.4, 0.6, size=2 * c)),
            A=Tensor(np.ones(1), requires_grad=trainable_gate),
            Q=Tensor(np.ones(1), requires_grad=trainable_gate),
            mu=Tensor(np.full(1, 0.5), requires_grad=trainable_gate),
            k=cfg.retention,
            form=cfg.gate_form,
        )
    return FcssamParams(cfg, cam, sc_avg, sc_max, sam_avg, sam_max, fcs)


def fcssam_parameters(p: FcssamParams, prefix: str = "fcssam") -> Dict[str, Tensor]:
    """Stable name -> tensor registry for the block."""
    params: Dict[str, Tensor] = {}

    def add_dense(name: str, d: DenseParams):
        params[f"{prefix}.{name}.weight"] = d.weight
        params[f"{prefix}.{name}.bias"] = d.bias

    def add_sc(name: str, pair):
        for idx, sep in enumerate(pair):
            params[f"{prefix}.{name}.{idx}.depthwise"] = sep.depthwise
            params[f"{prefix}.{name}.{idx}.depthwise_bias"] = sep.depthwise_bias
            params[f"{prefix}.{name}.{idx}.pointwise"] = sep.pointwise
            params[f"{prefix}.{name}.{idx}.pointwise_bias"] = sep.pointwise_bias

    if p.cam is not None:
        add_dense("cam.d1", p.cam.d1)
        add_dense("cam.d2", p.cam.d2)
        if p.cam.d1_max is not None:
            add_dense("cam.d1_max", p.cam.d1_max)
            add_dense("cam.d2_max", p.cam.d2_max)
    if p.sc_avg is not None:
        add_sc("sc_avg", p.sc_avg)
    if p.sc_max is not None:
        add_sc("sc_max", p.sc_max)
    for name, sam in (("sam_avg", p.sam_avg), ("sam_max", p.sam_max)):
        if sam is not None:
            params[f"{prefix}.{name}.kernel"] = sam.conv.kernel
            params[f"{prefix}.{name}.bias"] = sam.conv.bias
    if p.fcs is not None:
        params[f"{prefix}.fcs.alpha"] = p.fcs.alpha
        params[f"{prefix}.fcs.A"] = p.fcs.A
        params[f"{prefix}.fcs.Q"] = p.fcs.Q
        params[f"{prefix}.fcs.mu"] = p.fcs.mu
    return params
