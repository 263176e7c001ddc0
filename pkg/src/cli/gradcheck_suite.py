"""
Finite-difference verification suite: every differentiable op plus the
backbone, the FCSSAM block and the end-to-end model at desk shapes.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from src.autograd.gradcheck import finite_difference_check
from src.autograd.tensor import (
    Tensor,
    add,
    exp,
    matmul,
    mul,
    reciprocal,
    record,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sub,
    take,
)
from src.error_handling import GradientCheckError
from src.model.attention import (
    FcssamConfig,
    channel_attention,
    fcssam_forward,
    fcssam_parameters,
    fuzzy_channel_select,
    init_fcssam,
    richards_gate,
    spatial_attention,
)
from src.model.backbone import BackboneConfig, backbone_forward, backbone_parameters, init_backbone
from src.model.fanet import FaNet, ModelConfig
from src.model.model_metrics import record_gradcheck
from src.model.nn_ops import (
    Conv2dParams,
    channelwise_pool,
    concat_channels,
    conv2d,
    dense,
    depthwise_conv2d,
    global_pool,
    init_dense,
    init_separable_conv2d,
    relu,
    separable_conv2d,
    sigmoid,
    softmax,
)
from src.train.trainer import cross_entropy_loss

logger = logging.getLogger(__name__)

TOLERANCE = 1e-4
COMPOSITE_FLOOR = 1e-6
CORRUPTION_FACTOR = 1.5

# (function, point, floor)
Check = Tuple[Callable[[Tensor], Tensor], Tensor, float]
CaseBuilder = Callable[[np.random.Generator], List[Check]]


@dataclass
class CheckResult:
    op: str
    error: float
    floor: float  # relative-error denominator floor, largest over the op's cases

    @property
    def passed(self) -> bool:
        return self.error <= TOLERANCE


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Values with |x| in [0.1, 1] so kinks (relu, max) sit far from any FD step."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return reduce_sum(mul(out, Tensor(weights)))


def _projected(op: Callable[[Tensor], Tensor], out_shape, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = rng.normal(size=out_shape)
    return lambda x: _weighted_sum(op(x), weights)


def _param(data: np.ndarray) -> Tensor:
    return Tensor.parameter(data)


def _elementwise_cases(rng):
    a = _param(rng.normal(size=(2, 3, 3, 4)))
    b = Tensor(rng.normal(size=(2, 3, 3, 4)))
    w = Tensor(rng.normal(size=(1, 1, 1, 4)))
    return [
        (_projected(lambda x: add(x, b), a.shape, rng), a, 1e-12),
        (_projected(lambda x: sub(b, x), a.shape, rng), a, 1e-12),
        (_projected(lambda x: mul(x, b), a.shape, rng), a, 1e-12),
        (_projected(lambda x: mul(a, x), a.shape, rng), _param(w.data.copy()), 1e-12),
    ]


def _matmul_cases(rng):
    a = _param(rng.normal(size=(3, 4)))
    b = _param(rng.normal(size=(4, 2)))
    return [
        (_projected(lambda x: matmul(x, b), (3, 2), rng), a, 1e-12),
        (_projected(lambda x: matmul(a, x), (3, 2), rng), b, 1e-12),
    ]


def _unary_cases(rng):
    x = _param(rng.uniform(0.5, 1.5, size=(3, 5)))
    return [
        (_projected(exp, x.shape, rng), x, 1e-12),
        (_projected(reciprocal, x.shape, rng), _param(x.data.copy()), 1e-12),
        (_projected(lambda t: scale(t, -2.5), x.shape, rng), _param(x.data.copy()), 1e-12),
    ]


def _reduction_cases(rng):
    x = _param(rng.normal(size=(2, 3, 4)))
    return [
        (_projected(lambda t: reduce_sum(t, axis=1), (2, 4), rng), x, 1e-12),
        (_projected(lambda t: reduce_mean(t, axis=(0, 2), keepdims=True), (1, 3, 1), rng), _param(x.data.copy()), 1e-12),
        (_projected(lambda t: reshape(t, (6, 4)), (6, 4), rng), _param(x.data.copy()), 1e-12),
        (_projected(lambda t: take(t, [3, 0, 2], axis=-1), (2, 3, 3), rng), _param(x.data.copy()), 1e-12),
    ]


def _input_and_params(
    op: Callable[[Tensor], Tensor], x: Tensor, params: List[Tensor], rng: np.random.Generator, floor: float = 1e-12
) -> List[Check]:
    """One check against the input and one per parameter, sharing a projection."""
    weights = rng.normal(size=op(x).shape)
    checks: List[Check] = [(lambda t: _weighted_sum(op(t), weights), x, floor)]
    checks += [(lambda _: _weighted_sum(op(x), weights), p, floor) for p in params]
    return checks


def _conv_cases(rng):
    cases = []
    for kernel, stride, padding in ((3, 1, "same"), (3, 2, "same"), (1, 1, "same"), (3, 1, "valid"), (7, 1, "same")):
        x = _param(rng.normal(size=(2, 6, 6, 3)))
        p = Conv2dParams(_param(rng.normal(size=(kernel, kernel, 3, 2)) * 0.3), _param(rng.normal(size=2)), stride, padding)
        cases += _input_and_params(lambda t, p=p: conv2d(t, p), x, [p.kernel, p.bias], rng)
    return cases


def _depthwise_cases(rng):
    cases = []
    for stride in (1, 2):
        x = _param(rng.normal(size=(2, 5, 5, 3)))
        kernel = _param(rng.normal(size=(3, 3, 3)))
        bias = _param(rng.normal(size=3))
        cases += _input_and_params(lambda t, k=kernel, b=bias, s=stride: depthwise_conv2d(t, k, b, stride=s), x, [kernel, bias], rng)
    return cases


def _separable_cases(rng):
    x = _param(rng.normal(size=(2, 4, 4, 3)))
    p = init_separable_conv2d(rng, 3, 3, 5)
    p.depthwise_bias.data = rng.normal(size=3)
    params = [p.depthwise, p.depthwise_bias, p.pointwise, p.pointwise_bias]
    return _input_and_params(lambda t: separable_conv2d(t, p), x, params, rng)


def _pool_cases(rng):
    cases = []
    for mode in ("avg", "max"):
        x = _param(rng.normal(size=(2, 4, 4, 3)))
        cases += _input_and_params(lambda t, m=mode: global_pool(t, m), x, [], rng)
        y = _param(rng.normal(size=(2, 4, 4, 3)))
        cases += _input_and_params(lambda t, m=mode: channelwise_pool(t, m), y, [], rng)
    return cases


def _activation_cases(rng):
    return (
        _input_and_params(relu, _param(_away_from_zero(rng, (3, 4))), [], rng)
        + _input_and_params(sigmoid, _param(rng.normal(size=(3, 4)) * 3), [], rng)
        + _input_and_params(softmax, _param(rng.normal(size=(3, 4))), [], rng)
    )


def _dense_cases(rng):
    x = _param(rng.normal(size=(3, 4)))
    p = init_dense(rng, 4, 2)
    p.bias.data = rng.normal(size=2)
    return _input_and_params(lambda t: dense(t, p), x, [p.weight, p.bias], rng)


def _concat_cases(rng):
    a = _param(rng.normal(size=(2, 3, 3, 2)))
    b = _param(rng.normal(size=(2, 3, 3, 3)))
    return _input_and_params(lambda t: concat_channels(t, b), a, [b], rng)


def _richards_cases(rng):
    cases = []
    for form in ("richards", "logistic"):
        alpha = _param(rng.uniform(-1.0, 2.0, size=8))
        A = _param(rng.uniform(0.5, 2.0, size=1))
        Q = _param(rng.uniform(0.5, 2.0, size=1))
        mu = _param(rng.uniform(0.0, 1.0, size=1))
        cases += _input_and_params(lambda t, f=form, A=A, Q=Q, mu=mu: richards_gate(t, A, Q, mu, f), alpha, [A, Q, mu], rng)
    return cases


def _small_fcssam(rng, channels: int = 4, r: int = 2):
    cfg = FcssamConfig(channels=channels, reduction_ratio=r, retention=0.75)
    return init_fcssam(cfg, rng)


def _cam_cases(rng):
    p = _small_fcssam(rng)
    x = _param(rng.normal(size=(2, 4, 4, 4)))
    params = [p.cam.d1.weight, p.cam.d1.bias, p.cam.d2.weight, p.cam.d2.bias]
    return _input_and_params(lambda t: channel_attention(t, p.cam), x, params, rng, COMPOSITE_FLOOR)


def _sam_cases(rng):
    p = _small_fcssam(rng)
    cases = []
    for mode, sam in (("avg", p.sam_avg), ("max", p.sam_max)):
        x = _param(rng.normal(size=(2, 5, 5, 3)))
        op = lambda t, s=sam, m=mode: spatial_attention(t, s, m)
        cases += _input_and_params(op, x, [sam.conv.kernel, sam.conv.bias], rng, COMPOSITE_FLOOR)
    return cases


def _fcs_cases(rng):
    fcs = _small_fcssam(rng).fcs
    x = _param(rng.normal(size=(2, 3, 3, 8)))
    return _input_and_params(lambda t: fuzzy_channel_select(t, fcs), x, [fcs.alpha, fcs.A, fcs.Q, fcs.mu], rng)


def _cross_entropy_cases(rng):
    logits = _param(rng.normal(size=(4, 3)))
    labels = rng.integers(0, 3, size=4)
    weights = rng.uniform(0.5, 2.0, size=3)
    return [
        (lambda t: cross_entropy_loss(t, labels), logits, 1e-12),
        (lambda t: cross_entropy_loss(t, labels, weights), _param(logits.data.copy()), 1e-12),
    ]


def _backbone_cases(rng):
    cfg = BackboneConfig(widths=[4, 8], strides=[2, 1], input_height=8, input_width=8)
    params = init_backbone(cfg, rng)
    for stage in params:
        stage.bias.data = rng.normal(size=stage.bias.shape) * 0.1
    x = _param(rng.uniform(0.0, 1.0, size=(2, 8, 8, 3)))
    op = lambda t: backbone_forward(t, cfg, params)
    return _input_and_params(op, x, list(backbone_parameters(params).values()), rng, COMPOSITE_FLOOR)


def _fcssam_block_cases(rng):
    cases = []
    for wiring in ("cam_first", "cam_post"):
        cfg = FcssamConfig(channels=4, reduction_ratio=2, retention=0.75, wiring=wiring)
        p = init_fcssam(cfg, rng)
        x = _param(rng.normal(size=(2, 4, 4, 4)))
        params = [t for t in fcssam_parameters(p).values() if t.requires_grad]
        cases += _input_and_params(lambda t, p=p: fcssam_forward(t, p)[0], x, params, rng, COMPOSITE_FLOOR)
    return cases


def end_to_end_model(seed: int) -> Tuple[FaNet, Tensor, np.ndarray]:
    """2 x 16 x 16 x 3 input, C = 8, r = 4, k = 0.8, K = 3."""
    rng = np.random.default_rng([seed, 1])
    config = ModelConfig(
        backbone=BackboneConfig(widths=[4, 8], strides=[2, 2], input_height=16, input_width=16),
        fcssam=FcssamConfig(channels=8, reduction_ratio=4, retention=0.8),
        num_classes=3,
    )
    model = FaNet.build(config, seed=seed)
    # biases off zero so no ReLU input sits exactly on its kink
    for name, tensor in model.parameters().items():
        if name.endswith("bias"):
            tensor.data = rng.normal(size=tensor.shape) * 0.1
    images = Tensor(rng.uniform(0.0, 1.0, size=(2, 16, 16, 3)))
    labels = np.array([0, 2])
    return model, images, labels


def _model_cases(rng):
    model, images, labels = end_to_end_model(int(rng.integers(0, 2**31)))
    f = lambda _: cross_entropy_loss(model(images), labels)
    return [(f, t, COMPOSITE_FLOOR) for t in model.trainable_parameters().values()]


SUITE: Dict[str, CaseBuilder] = {
    "elementwise": _elementwise_cases,
    "matmul": _matmul_cases,
    "unary": _unary_cases,
    "reduction": _reduction_cases,
    "conv2d": _conv_cases,
    "depthwise_conv2d": _depthwise_cases,
    "separable_conv2d": _separable_cases,
    "pooling": _pool_cases,
    "activation": _activation_cases,
    "dense": _dense_cases,
    "concat_channels": _concat_cases,
    "richards_gate": _richards_cases,
    "channel_attention": _cam_cases,
    "spatial_attention": _sam_cases,
    "fuzzy_channel_select": _fcs_cases,
    "cross_entropy": _cross_entropy_cases,
    "backbone": _backbone_cases,
    "fcssam": _fcssam_block_cases,
    "fanet": _model_cases,
}


def _corrupted(f: Callable[[Tensor], Tensor]) -> Callable[[Tensor], Tensor]:
    """Identity on the value, gradient scaled by CORRUPTION_FACTOR."""
    def wrapped(x: Tensor) -> Tensor:
        out = f(x)
        return record("corrupt", out.data.copy(), (out,), lambda g: (g * CORRUPTION_FACTOR,))
    return wrapped


def run_suite(seed: int = 0, corrupt: Optional[str] = None, ops: Optional[List[str]] = None) -> List[CheckResult]:
    """Run every case (or ``ops``) and return the max relative error per op, in suite order."""
    if corrupt is not None and corrupt not in SUITE:
        raise GradientCheckError(f"unknown op to corrupt: {corrupt}")
    results = []
    for index, (name, build) in enumerate(SUITE.items()):
        if ops is not None and name not in ops:
            continue
        rng = np.random.default_rng([seed, index])
        worst, widest = 0.0, 0.0
        for f, x, floor in build(rng):
            if name == corrupt:
                f = _corrupted(f)
            worst = max(worst, finite_difference_check(f, x, floor=floor))
            widest = max(widest, floor)
        record_gradcheck(name, worst)
        logger.debug(f"gradcheck {name}: max relative error {worst:.3e} (floor {widest:.0e})")
        results.append(CheckResult(name, worst, widest))
    return results


def assert_passed(results: List[CheckResult]) -> None:
    failed = [r for r in results if not r.passed]
    if failed:
        listing = ", ".join(f"{r.op} ({r.error:.3e})" for r in failed)
        raise GradientCheckError(f"gradient check failed for: {listing}")
