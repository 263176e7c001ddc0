"""
Dense N-d tensors with tape-based reverse-mode differentiation.

Tensors wrap a row-major ``numpy`` array (float64 unless a checkpoint asks for
float32). Operations executed while a :class:`Tape` is active and with at least
one gradient-tracking input are recorded on that tape together with a closure
computing the local gradients; :func:`backward` replays the tape in reverse.

Broadcasting is limited to singleton axes of the second operand: ``b`` may have
fewer axes than ``a`` (left-padded with ones) and every axis of ``b`` must either
equal ``a``'s extent or be 1. The result always has ``a``'s shape.
"""
import itertools
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.error_handling import DetachedTensorError, NumericalError, ShapeMismatchError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64

ArrayLike = Union[np.ndarray, float, int, Sequence[float], Sequence[Sequence[float]]]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_node_ids = itertools.count()
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("active_tape", default=None)


class Tensor:
    """Dense array with an optional gradient buffer and a node id on the tape."""

    def __init__(self, data: ArrayLike, requires_grad: bool = False, dtype=DEFAULT_DTYPE):
        self.data: np.ndarray = np.array(data, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._tape: Optional["Tape"] = None

    @classmethod
    def _wrap(cls, data: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data)
        out.grad = None
        out.requires_grad = False
        out.node_id = next(_node_ids)
        out._tape = None
        return out

    @classmethod
    def parameter(cls, data: ArrayLike) -> "Tensor":
        return cls(data, requires_grad=True)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"


@dataclass
class TapeEntry:
    op: str
    output_id: int
    parents: Tuple[Tensor, ...]
    backward: BackwardFn


class Tape:
    """Ordered record of executed operations. Use as a context manager."""

    def __init__(self):
        self._entries: List[TapeEntry] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def ops(self) -> List[str]:
        return [entry.op for entry in self._entries]

    def record(self, op: str, output: Tensor, parents: Sequence[Tensor], backward_fn: BackwardFn) -> None:
        output.requires_grad = True
        output._tape = self
        self._entries.append(TapeEntry(op, output.node_id, tuple(parents), backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ShapeMismatchError(f"backward requires a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise DetachedTensorError("loss was not produced on this tape")

        pending: Dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for entry in reversed(self._entries):
            grad = pending.pop(entry.output_id, None)
            if grad is None:
                continue
            local_grads = entry.backward(grad)
            for parent, parent_grad in zip(entry.parents, local_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent_grad.shape != parent.shape:
                    raise ShapeMismatchError(
                        f"{entry.op} returned gradient of shape {parent_grad.shape} for input {parent.shape}"
                    )
                if parent._tape is self:
                    if parent.node_id in pending:
                        pending[parent.node_id] = pending[parent.node_id] + parent_grad
                    else:
                        pending[parent.node_id] = parent_grad
                elif parent.grad is None:
                    parent.grad = np.array(parent_grad, dtype=parent.data.dtype)
                else:
                    parent.grad = parent.grad + parent_grad


def record(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result, recording it on the active tape when any input tracks gradients."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor._wrap(data)
    tape = _active_tape.get()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, out, parents, backward_fn)
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every gradient-tracking leaf reachable from ``loss``."""
    if loss.size != 1:
        raise ShapeMismatchError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise DetachedTensorError("loss is detached: it was not produced on an active tape")
    loss._tape.backward(loss)


def as_tensor(value: Union[Tensor, ArrayLike]) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def broadcast_axes(a_shape: Tuple[int, ...], b_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Axes of ``a_shape`` along which ``b_shape`` is broadcast (singleton rule)."""
    if len(b_shape) > len(a_shape):
        raise ShapeMismatchError(f"shape mismatch: cannot broadcast {b_shape} to {a_shape}")
    padded = (1,) * (len(a_shape) - len(b_shape)) + tuple(b_shape)
    axes = []
    for axis, (ea, eb) in enumerate(zip(a_shape, padded)):
        if eb == ea:
            continue
        if eb != 1:
            raise ShapeMismatchError(f"shape mismatch: cannot broadcast {b_shape} to {a_shape}")
        axes.append(axis)
    return tuple(axes)


def _reduce_to(grad: np.ndarray, axes: Tuple[int, ...], shape: Tuple[int, ...]) -> np.ndarray:
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def elementwise(op: str, a: Union[Tensor, ArrayLike], b: Union[Tensor, ArrayLike]) -> Tensor:
    """``add`` | ``sub`` | ``mul`` with ``b`` broadcast to ``a``'s shape."""
    a, b = as_tensor(a), as_tensor(b)
    axes = broadcast_axes(a.shape, b.shape)
    a_data, b_data = a.data, b.data.reshape((1,) * (a.ndim - b.ndim) + b.shape)

    if op == "add":
        data = a_data + b_data

        def backward_fn(g):
            return g, _reduce_to(g, axes, b.shape)

    elif op == "sub":
        data = a_data - b_data

        def backward_fn(g):
            return g, _reduce_to(-g, axes, b.shape)

    elif op == "mul":
        data = a_data * b_data

        def backward_fn(g):
            return g * b_data, _reduce_to(g * a_data, axes, b.shape)

    else:
        raise ValueError(f"Unknown elementwise op: {op}")
    return record(op, data, (a, b), backward_fn)


def add(a, b) -> Tensor:
    return elementwise("add", a, b)


def sub(a, b) -> Tensor:
    return elementwise("sub", a, b)


def mul(a, b) -> Tensor:
    return elementwise("mul", a, b)


def scale(x: Tensor, factor: float) -> Tensor:
    return record("scale", x.data * factor, (x,), lambda g: (g * factor,))


def add_scalar(x: Tensor, value: float) -> Tensor:
    return record("add_scalar", x.data + value, (x,), lambda g: (g,))


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(x.data)
    return record("exp", data, (x,), lambda g: (g * data,))


def reciprocal(x: Tensor) -> Tensor:
    with np.errstate(divide="ignore"):
        data = 1.0 / x.data
    return record("reciprocal", data, (x,), lambda g: (-g * data * data,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    a_data, b_data = a.data, b.data

    def backward_fn(g):
        return g @ b_data.T, a_data.T @ g

    return record("matmul", a_data @ b_data, (a, b), backward_fn)


def reduce_sum(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("sum", data, (x,), backward_fn)


def reduce_mean(x: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    original = x.shape
    data = x.data.reshape(shape)
    return record("reshape", data, (x,), lambda g: (g.reshape(original),))


def take(x: Tensor, indices: Sequence[int], axis: int = -1) -> Tensor:
    """Gather ``indices`` along ``axis``; gradient is scattered back, zero elsewhere."""
    indices = np.asarray(indices, dtype=np.int64)
    axis = axis % x.ndim
    shape = x.shape

    def backward_fn(g):
        full = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        return (full,)

    return record("take", np.take(x.data, indices, axis=axis), (x,), backward_fn)


def dump_text(x: Tensor, path: Union[str, Path]) -> None:
    """Debug dump: first line the shape, then one row of the last axis per line."""
    data = x.data
    rows = data.reshape(-1, data.shape[-1]) if data.ndim else data.reshape(1, 1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(" ".join(str(e) for e in data.shape) + "\n")
        for row in rows:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def load_text(path: Union[str, Path]) -> Tensor:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    shape = tuple(int(e) for e in lines[0].split())
    values = [float(v) for line in lines[1:] for v in line.split()]
    return Tensor(np.array(values, dtype=DEFAULT_DTYPE).reshape(shape))
