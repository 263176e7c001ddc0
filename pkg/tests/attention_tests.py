import numpy as np
import pytest
from pydantic import ValidationError

from src.autograd.gradcheck import finite_difference_check
from src.autograd.tensor import Tape, Tensor, backward, mul, reduce_sum
from src.error_handling import ConfigError, NumericalError, ShapeMismatchError
from src.model.attention import (
    FcsParams,
    FcssamConfig,
    channel_attention,
    fcssam_forward,
    fcssam_parameters,
    fuzzy_channel_select,
    init_fcssam,
    retained_count,
    richards_gate,
    select_top_channels,
    spatial_attention,
    spatial_attention_map,
)


@pytest.fixture
def rng():
    return np.random.default_rng(99)


def build(rng, channels=8, r=4, k=0.8, **overrides):
    cfg = FcssamConfig(channels=channels, reduction_ratio=r, retention=k, **overrides)
    return init_fcssam(cfg, rng)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@pytest.mark.parametrize("channels", [4, 8, 10, 16])
@pytest.mark.parametrize("k", [0.25, 0.5, 0.8, 1.0])
def test_output_shape_law(channels, k, rng):
    r = 2 if channels % 4 else 4
    p = build(rng, channels=channels, r=r, k=k)
    out, _ = fcssam_forward(Tensor(rng.normal(size=(2, 5, 6, channels))), p)
    assert out.shape == (2, 5, 6, max(1, int(np.floor(k * 2 * channels + 0.5))))


def test_c10_k08_keeps_16_channels(rng):
    p = build(rng, channels=10, r=5, k=0.8)
    out, diag = fcssam_forward(Tensor(rng.normal(size=(1, 4, 4, 10))), p)
    assert out.shape[-1] == 16
    assert len(diag.selected_indices) == 16
    assert len(diag.gate_values) == 20


@pytest.mark.parametrize("k,channels,expected", [(0.8, 20, 16), (0.01, 8, 1), (1.0, 8, 8), (0.5, 5, 3), (0.25, 2, 1)])
def test_retained_count_rounding(k, channels, expected):
    assert retained_count(k, channels) == expected


def test_retention_out_of_range():
    with pytest.raises(ConfigError):
        retained_count(0.0, 8)
    with pytest.raises(ValidationError):
        FcssamConfig(channels=8, reduction_ratio=4, retention=1.5)


def test_channels_must_divide_by_reduction_ratio():
    with pytest.raises(ValidationError):
        FcssamConfig(channels=10, reduction_ratio=4)


def oracle_selection(gates, m):
    ranked = sorted(range(len(gates)), key=lambda i: (-gates[i], i))
    return sorted(ranked[:m])


def test_selection_matches_full_sort_oracle(rng):
    for trial in range(1000):
        size = int(rng.integers(1, 33))
        if trial % 3 == 0:
            gates = rng.choice([0.1, 0.2, 0.3], size=size)  # engineered ties
        else:
            gates = rng.uniform(0, 0.5, size=size)
        m = int(rng.integers(1, size + 1))
        assert select_top_channels(gates, m).tolist() == oracle_selection(gates.tolist(), m)


def test_all_equal_gates_keep_lowest_indices():
    assert select_top_channels(np.full(10, 0.25), 4).tolist() == [0, 1, 2, 3]


def test_richards_monotone_with_bounded_codomain(rng):
    for _ in range(1000):
        A, Q = rng.uniform(0.05, 2.0, size=2)
        mu = rng.uniform(-0.5, 0.5)
        alpha = np.sort(rng.uniform(-1.0, 1.0, size=6))
        alpha = alpha[np.diff(alpha, prepend=-np.inf) > 1e-6]
        gates = richards_gate(Tensor(alpha), A, Q, mu).data
        assert np.all(np.diff(gates) > 0)
        assert np.all((gates > 0) & (gates < 0.5))


def test_richards_closed_form_at_mu(rng):
    for A in rng.uniform(0.1, 5.0, size=20):
        value = richards_gate(Tensor([0.3]), A, 1.7, 0.3).data[0]
        assert abs(value - 1.0 / (1.0 + np.exp(A))) <= 1e-12


def test_logistic_gate_form():
    value = richards_gate(Tensor([0.5]), 2.0, 1.0, 0.5, form="logistic").data[0]
    assert value == pytest.approx(1.0 / 3.0, abs=1e-15)
    with pytest.raises(ConfigError):
        richards_gate(Tensor([0.5]), 1.0, 1.0, 0.5, form="bogus")


@pytest.mark.parametrize("form,middle,upper", [("richards", 1.0 / (1.0 + np.e), 0.5), ("logistic", 0.5, 1.0)])
def test_gate_saturates_without_overflow(form, middle, upper):
    alpha = Tensor.parameter([-800.0, -40.0, 0.0, 40.0, 800.0])
    with Tape():
        gates = richards_gate(alpha, 1.0, 1.0, 0.0, form=form)
        total = reduce_sum(gates)
    backward(total)
    assert gates.data[0] == pytest.approx(0.0, abs=1e-15)
    assert gates.data[-1] == pytest.approx(upper, abs=1e-15)
    assert gates.data[2] == pytest.approx(middle, abs=1e-15)
    assert abs(gates.data[3] - upper) <= 1e-12
    assert np.all(np.diff(gates.data) >= 0)
    assert np.all(np.isfinite(alpha.grad))


def test_gate_gradient_in_shape_parameters(rng):
    alpha = Tensor(rng.uniform(-1.0, 2.0, size=6))
    for form in ("richards", "logistic"):
        A, Q, mu = Tensor.parameter([1.4]), Tensor.parameter([0.6]), Tensor.parameter([0.3])
        f = lambda _: reduce_sum(richards_gate(alpha, A, Q, mu, form=form))
        for param in (A, Q, mu):
            assert finite_difference_check(f, param) <= 1e-6


def test_gate_needs_positive_A():
    with pytest.raises(NumericalError):
        richards_gate(Tensor([0.5]), 0.0, 1.0, 0.5)


def test_fuzzy_select_scales_kept_channels(rng):
    f = rng.normal(size=(1, 2, 2, 6))
    alpha = np.array([0.9, 0.1, 0.5, 0.7, 0.2, 0.8])
    p = FcsParams(Tensor(alpha), Tensor([1.0]), Tensor([1.0]), Tensor([0.5]), k=0.5)
    out = fuzzy_channel_select(Tensor(f), p).data
    gates = 1.0 / (1.0 + np.exp(np.exp(-(alpha - 0.5))))
    kept = [0, 3, 5]
    np.testing.assert_allclose(out, f[..., kept] * gates[kept], rtol=1e-14)


def test_fuzzy_select_alpha_shape_checked(rng):
    p = FcsParams(Tensor(np.zeros(4)), Tensor([1.0]), Tensor([1.0]), Tensor([0.5]), k=0.5)
    with pytest.raises(ShapeMismatchError):
        fuzzy_channel_select(Tensor(np.zeros((1, 2, 2, 6))), p)


def test_fuzzy_select_commutes_with_channel_permutation(rng):
    f = rng.normal(size=(2, 3, 3, 10))
    alpha = rng.uniform(-1.0, 1.0, size=10)
    perm = rng.permutation(10)

    def select(f, alpha):
        p = FcsParams(Tensor(alpha), Tensor([1.3]), Tensor([0.8]), Tensor([0.1]), k=0.6)
        return fuzzy_channel_select(Tensor(f), p).data

    out = select(f, alpha)
    permuted = select(f[..., perm], alpha[perm])
    kept = oracle_selection(alpha.tolist(), 6)
    kept_after = oracle_selection(alpha[perm].tolist(), 6)
    # the same channels survive; each output keeps its input's order
    assert sorted(perm[kept_after].tolist()) == kept
    position = {channel: i for i, channel in enumerate(kept)}
    np.testing.assert_allclose(permuted, out[..., [position[c] for c in perm[kept_after]]], rtol=1e-14, atol=0)


def test_channel_attention_matches_formula(rng):
    p = build(rng)
    f = rng.normal(size=(2, 3, 3, 8))
    for d in (p.cam.d1, p.cam.d2):
        d.bias.data = rng.normal(size=d.bias.shape)

    def mlp(v):
        hidden = np.maximum(v @ p.cam.d1.weight.data + p.cam.d1.bias.data, 0)
        return hidden @ p.cam.d2.weight.data + p.cam.d2.bias.data

    expected = sigmoid(mlp(f.mean(axis=(1, 2))) + mlp(f.max(axis=(1, 2))))
    weights = channel_attention(Tensor(f), p.cam).data
    np.testing.assert_allclose(weights, expected, rtol=1e-12)
    assert np.all((weights > 0) & (weights < 1))


def test_unshared_cam_dense_layers_registered(rng):
    p = build(rng, share_cam_dense=False)
    names = fcssam_parameters(p)
    assert "fcssam.cam.d1_max.weight" in names and "fcssam.cam.d2_max.bias" in names


def test_spatial_map_shape(rng):
    p = build(rng)
    m = spatial_attention_map(Tensor(rng.normal(size=(2, 5, 7, 8))), p.sam_avg, "avg")
    assert m.shape == (2, 5, 7, 1)
    assert np.all((m.data > 0) & (m.data < 1))


def test_spatial_attention_with_zero_conv_halves_input(rng):
    p = build(rng)
    p.sam_avg.conv.kernel.data = np.zeros((7, 7, 1, 1))
    f = rng.normal(size=(2, 4, 5, 8))
    np.testing.assert_array_equal(spatial_attention(Tensor(f), p.sam_avg, "avg").data, 0.5 * f)


@pytest.mark.parametrize("mode", ["avg", "max"])
def test_spatial_attention_matches_loop_oracle(mode, rng):
    sam = build(rng).sam_avg
    sam.conv.bias.data = np.array([0.3])
    f = rng.normal(size=(1, 8, 8, 4))
    pooled = np.pad(f[0].mean(axis=2) if mode == "avg" else f[0].max(axis=2), 3)
    kernel = sam.conv.kernel.data[:, :, 0, 0]
    logits = np.zeros((8, 8))
    for y in range(8):
        for x in range(8):
            logits[y, x] = np.sum(pooled[y:y + 7, x:x + 7] * kernel) + 0.3
    expected = f * sigmoid(logits)[None, :, :, None]
    np.testing.assert_allclose(spatial_attention(Tensor(f), sam, mode).data, expected, rtol=1e-12, atol=1e-14)


def test_shared_sc_blocks_have_no_max_weights(rng):
    p = build(rng, share_sc=True)
    assert p.sc_max is None
    assert not any(name.startswith("fcssam.sc_max") for name in fcssam_parameters(p))


@pytest.mark.parametrize(
    "variant,expected",
    [("cam", 8), ("sam", 16), ("sam_cam", 16), ("sam_fcs", 13), ("cssam", 13), ("fcssam", 13)],
)
def test_variant_output_channels(variant, expected, rng):
    p = build(rng, variant=variant)
    out, diag = fcssam_forward(Tensor(rng.normal(size=(1, 4, 4, 8))), p)
    assert out.shape[-1] == expected == p.config.output_channels
    assert (diag.cam_weights is not None) == (variant in ("cam", "sam_cam", "cssam", "fcssam"))
    assert (diag.sam_avg_map is not None) == (variant != "cam")
    assert (diag.selected_indices is not None) == (variant in ("sam_fcs", "cssam", "fcssam"))


def test_cssam_freezes_gate_shape_parameters(rng):
    p = build(rng, variant="cssam")
    assert not p.fcs.A.requires_grad and not p.fcs.Q.requires_grad and not p.fcs.mu.requires_grad
    assert p.fcs.alpha.requires_grad
    q = build(rng, variant="fcssam")
    assert q.fcs.A.requires_grad and q.fcs.mu.requires_grad


def test_initial_gate_parameters(rng):
    p = build(rng)
    assert np.all((p.fcs.alpha.data >= 0.4) & (p.fcs.alpha.data <= 0.6))
    assert p.fcs.A.data[0] == 1.0 and p.fcs.Q.data[0] == 1.0 and p.fcs.mu.data[0] == 0.5


def test_wrong_channel_count_rejected(rng):
    with pytest.raises(ShapeMismatchError):
        fcssam_forward(Tensor(np.zeros((1, 4, 4, 6))), build(rng))


@pytest.mark.parametrize("wiring", ["cam_first", "cam_post"])
def test_block_gradient_wrt_input(wiring, rng):
    p = build(rng, channels=4, r=2, k=0.75, wiring=wiring)
    x = Tensor.parameter(rng.normal(size=(2, 4, 4, 4)))
    out_shape = fcssam_forward(x, p)[0].shape
    weights = Tensor(rng.normal(size=out_shape))
    f = lambda t: reduce_sum(mul(fcssam_forward(t, p)[0], weights))
    assert finite_difference_check(f, x, floor=1e-6) <= 1e-4
    assert finite_difference_check(lambda _: f(x), p.fcs.alpha, floor=1e-6) <= 1e-4


def test_block_closed_form_with_neutral_weights(rng):
    p = build(rng, channels=4, r=2, k=0.75)
    for name, tensor in fcssam_parameters(p).items():
        if not name.startswith("fcssam.fcs."):
            tensor.data = np.zeros_like(tensor.data)
    # both SC blocks become the identity
    for pair in (p.sc_avg, p.sc_max):
        for sep in pair:
            centre = sep.depthwise.shape[0] // 2
            sep.depthwise.data[centre, centre, :] = 1.0
            sep.pointwise.data[0, 0] = np.eye(4)
    f = rng.normal(size=(2, 5, 5, 4))
    out, diag = fcssam_forward(Tensor(f), p)

    np.testing.assert_array_equal(diag.cam_weights, 0.5)
    np.testing.assert_array_equal(diag.sam_avg_map, 0.5)
    np.testing.assert_array_equal(diag.sam_max_map, 0.5)
    branch = 0.5 * np.maximum(0.5 * f, 0.0)
    concat = np.concatenate([branch, branch], axis=-1)
    gates = 1.0 / (1.0 + np.exp(np.exp(-(p.fcs.alpha.data - 0.5))))
    np.testing.assert_allclose(diag.gate_values, gates, rtol=1e-14)
    kept = oracle_selection(gates.tolist(), 6)
    assert diag.selected_indices.tolist() == kept
    np.testing.assert_allclose(out.data, concat[..., kept] * gates[kept], rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("wiring", ["cam_first", "cam_post"])
def test_block_gradient_wrt_every_parameter(wiring, rng):
    p = build(rng, channels=6, r=3, k=0.8, wiring=wiring)
    params = fcssam_parameters(p)
    for name, tensor in params.items():
        if name.endswith("bias"):
            tensor.data = rng.normal(size=tensor.shape) * 0.1
    x = Tensor(rng.normal(size=(1, 8, 8, 6)))
    weights = Tensor(rng.normal(size=fcssam_forward(x, p)[0].shape))
    f = lambda _: reduce_sum(mul(fcssam_forward(x, p)[0], weights))
    assert fcssam_forward(x, p)[0].shape == (1, 8, 8, 10)
    for name, tensor in params.items():
        assert tensor.requires_grad, name
        assert finite_difference_check(f, tensor, floor=1e-6) <= 1e-4, name
