import itertools

import numpy as np
import pytest

from src.autograd.gradcheck import finite_difference_check
from src.autograd.tensor import (
    Tape,
    Tensor,
    add,
    backward,
    dump_text,
    load_text,
    matmul,
    mul,
    ones_like,
    reduce_mean,
    reduce_sum,
    reshape,
    sub,
    take,
)
from src.error_handling import DetachedTensorError, NumericalError, ShapeMismatchError
from src.model.attention import richards_gate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def grad_of(f, x):
    x.grad = None
    with Tape():
        loss = f(x)
    backward(loss)
    return x.grad


def test_add_values():
    np.testing.assert_array_equal(add(Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_mul_identity(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    np.testing.assert_array_equal(mul(x, ones_like(x)).data, x.data)


def test_sub_values():
    np.testing.assert_array_equal(sub(Tensor([5.0, 1.0]), Tensor([2.0, 3.0])).data, [3.0, -2.0])


def test_channel_broadcast_matches_loop(rng):
    x = rng.normal(size=(2, 2, 3))
    w = rng.normal(size=(1, 1, 3))
    out = mul(Tensor(x), Tensor(w)).data
    expected = np.empty_like(x)
    for i in range(2):
        for j in range(2):
            for c in range(3):
                expected[i, j, c] = x[i, j, c] * w[0, 0, c]
    np.testing.assert_array_equal(out, expected)


def _small_shapes():
    for rank in range(1, 5):
        for shape in itertools.product(range(1, 5), repeat=rank):
            yield shape


def test_broadcast_multiply_equals_loop_on_all_small_shapes(rng):
    checked = 0
    for shape in _small_shapes():
        if np.prod(shape) > 64 and rng.random() > 0.05:
            continue
        a = rng.normal(size=shape)
        mask = rng.random(len(shape)) < 0.5
        b_shape = tuple(1 if m else e for m, e in zip(mask, shape))
        b = rng.normal(size=b_shape)
        out = mul(Tensor(a), Tensor(b)).data
        expected = np.empty_like(a)
        for idx in np.ndindex(*shape):
            b_idx = tuple(0 if e == 1 else i for i, e in zip(idx, b_shape))
            expected[idx] = a[idx] * b[b_idx]
        np.testing.assert_array_equal(out, expected)
        checked += 1
    assert checked > 50


def test_broadcast_left_pads_missing_axes(rng):
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=4)
    np.testing.assert_array_equal(add(Tensor(a), Tensor(b)).data, a + b)


def test_incompatible_shapes_name_both():
    with pytest.raises(ShapeMismatchError) as exc:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))
    assert "(2, 2)" in str(exc.value) and "(2, 3)" in str(exc.value)


def test_broadcast_gradient_is_sum_reduced(rng):
    a = Tensor.parameter(rng.normal(size=(2, 3, 4)))
    w = Tensor.parameter(rng.normal(size=(1, 1, 4)))
    with Tape():
        loss = reduce_sum(mul(a, w))
    backward(loss)
    np.testing.assert_allclose(w.grad, a.data.sum(axis=(0, 1), keepdims=True))
    np.testing.assert_allclose(a.grad, np.broadcast_to(w.data, a.shape))


def test_matmul_identity_and_arithmetic():
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), m).data, m.data)
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_inner_dimension_mismatch():
    with pytest.raises(ShapeMismatchError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences(rng):
    a = Tensor.parameter(rng.normal(size=(3, 4)))
    b = Tensor.parameter(rng.normal(size=(4, 2)))
    weights = Tensor(rng.normal(size=(3, 2)))
    assert finite_difference_check(lambda x: reduce_sum(mul(matmul(x, b), weights)), a) <= 1e-6
    assert finite_difference_check(lambda x: reduce_sum(mul(matmul(a, x), weights)), b) <= 1e-6


@pytest.mark.parametrize("shape", [(1,), (3,), (2, 3), (2, 1, 4), (2, 3, 2, 2)])
def test_sum_loss_gives_all_ones(shape, rng):
    x = Tensor.parameter(rng.normal(size=shape))
    np.testing.assert_array_equal(grad_of(reduce_sum, x), np.ones(shape))


def test_sum_of_squares_gradient():
    x = Tensor.parameter([1.0, 2.0, 3.0])
    np.testing.assert_allclose(grad_of(lambda t: reduce_sum(mul(t, t)), x), [2.0, 4.0, 6.0])


def test_reused_tensor_doubles_gradient(rng):
    x = Tensor.parameter(rng.normal(size=(3, 2)))
    once = grad_of(reduce_sum, x).copy()
    twice = grad_of(lambda t: add(reduce_sum(t), reduce_sum(t)), x)
    np.testing.assert_array_equal(twice, 2 * once)


def test_backward_rejects_non_scalar(rng):
    x = Tensor.parameter(rng.normal(size=3))
    with Tape():
        y = mul(x, x)
    with pytest.raises(ShapeMismatchError):
        backward(y)


def test_backward_rejects_detached_loss(rng):
    x = Tensor.parameter(rng.normal(size=3))
    loss = reduce_sum(x)  # no active tape
    with pytest.raises(DetachedTensorError):
        backward(loss)
    assert isinstance(DetachedTensorError("x"), ValueError)


def test_tape_orders_ops_topologically(rng):
    x = Tensor.parameter(rng.normal(size=(2, 2)))
    with Tape() as tape:
        reduce_sum(mul(add(x, x), x))
    assert tape.ops == ["add", "mul", "sum"]


def test_ops_without_tracking_inputs_are_not_recorded():
    with Tape() as tape:
        add(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0


def test_non_finite_result_raises():
    with pytest.raises(NumericalError):
        mul(Tensor([np.inf]), Tensor([0.0]))


def test_reduce_mean_and_reshape_gradients(rng):
    x = Tensor.parameter(rng.normal(size=(2, 3)))
    np.testing.assert_allclose(grad_of(reduce_mean, x), np.full((2, 3), 1 / 6))
    w = Tensor(rng.normal(size=(3, 2)))
    g = grad_of(lambda t: reduce_sum(mul(reshape(t, (3, 2)), w)), x)
    np.testing.assert_array_equal(g, w.data.reshape(2, 3))


def test_take_scatters_gradient(rng):
    x = Tensor.parameter(rng.normal(size=(2, 4)))
    g = grad_of(lambda t: reduce_sum(take(t, [3, 1], axis=-1)), x)
    np.testing.assert_array_equal(g, [[0, 1, 0, 1], [0, 1, 0, 1]])


def test_finite_difference_sum_of_squares(rng):
    x = Tensor.parameter(rng.normal(size=(4, 3)))
    assert finite_difference_check(lambda t: reduce_sum(mul(t, t)), x) <= 1e-8


def test_finite_difference_constant_function(rng):
    x = Tensor.parameter(rng.normal(size=5))
    assert finite_difference_check(lambda t: Tensor(3.0), x) == 0.0


def test_finite_difference_richards_gate(rng):
    alpha = Tensor.parameter(rng.uniform(-1, 2, size=8))
    assert finite_difference_check(lambda t: reduce_sum(richards_gate(t, 1.3, 0.7, 0.4)), alpha) <= 1e-6


def test_finite_difference_rejects_non_scalar(rng):
    x = Tensor.parameter(rng.normal(size=3))
    with pytest.raises(ShapeMismatchError):
        finite_difference_check(lambda t: mul(t, t), x)


def test_finite_difference_restores_input(rng):
    data = rng.normal(size=(3, 3))
    x = Tensor.parameter(data.copy())
    finite_difference_check(lambda t: reduce_sum(mul(t, t)), x, max_elements=4)
    np.testing.assert_array_equal(x.data, data)
    assert x.requires_grad and x.grad is None


@pytest.mark.parametrize("instance", range(20))
def test_elementwise_gradients_on_random_instances(instance):
    rng = np.random.default_rng(instance)
    a = Tensor.parameter(rng.normal(size=(2, 3, 4)))
    b = Tensor.parameter(rng.normal(size=(3, 1)))
    w = Tensor(rng.normal(size=(2, 3, 4)))
    for op in (add, sub, mul):
        assert finite_difference_check(lambda t: reduce_sum(mul(op(t, b), w)), a) <= 1e-4
        assert finite_difference_check(lambda t: reduce_sum(mul(op(a, t), w)), b) <= 1e-4


def test_text_dump_roundtrip_is_exact(tmp_path, rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    path = tmp_path / "x.txt"
    dump_text(x, path)
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "2 3 4"
    assert len(lines) == 1 + 6
    np.testing.assert_array_equal(load_text(path).data, x.data)
