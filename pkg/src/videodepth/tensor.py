"""Dense float tensors with define-by-run reverse-mode differentiation.

Every differentiable operation wraps a numpy forward computation and a closure
that maps the output gradient to one gradient per parent. Calling
``backward()`` on a scalar builds a :class:`Tape` (the topologically ordered
nodes reachable from the output) and runs the closures in reverse order,
visiting each node once. Leaf tensors with ``requires_grad=True`` receive
their gradient in ``.grad``; intermediate gradients are not retained.

Storage defaults to float32. Sum/mean reductions and normalization statistics
accumulate in float64. ``precision("float64")`` switches the default dtype,
which is how the finite-difference checks obtain tight tolerances.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterator, Sequence
from typing import Any

import numpy as np

from src.videodepth.errors import ContractError, NonFiniteError, ShapeError

BackwardFn = Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class _EngineState(threading.local):
    """Per-thread switches: tapes are never shared between threads."""

    def __init__(self):
        self.grad_enabled = True
        self.anomaly = False
        self.dtype: np.dtype = np.dtype(np.float32)


_state = _EngineState()


def default_dtype() -> np.dtype:
    """Return the dtype new tensors are created with."""
    return _state.dtype


@contextlib.contextmanager
def precision(dtype: str | type | np.dtype) -> Iterator[None]:
    """Temporarily change the default tensor dtype (``"float32"`` or ``"float64"``)."""
    new = np.dtype(dtype)
    if new not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError(f"Unsupported tensor dtype: {new}")
    previous = _state.dtype
    _state.dtype = new
    try:
        yield
    finally:
        _state.dtype = previous


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    previous = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@contextlib.contextmanager
def detect_anomaly() -> Iterator[None]:
    """Abort with :class:`NonFiniteError` as soon as an op produces NaN/Inf."""
    previous = _state.anomaly
    _state.anomaly = True
    try:
        yield
    finally:
        _state.anomaly = previous


def is_grad_enabled() -> bool:
    return _state.grad_enabled


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation.

    Attributes:
        data: Row-major float array (float32 unless created under ``precision``)
        requires_grad: Whether gradients flow to / through this tensor
        grad: Accumulated gradient (leaves only), same shape as ``data``
        op: Name of the producing operation ("leaf" for inputs and parameters)
    """

    __array_priority__ = 1000

    def __init__(self, data: Any, requires_grad: bool = False, dtype: Any = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data: np.ndarray = np.array(
            data, dtype=dtype if dtype is not None else _state.dtype, copy=True
        )
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        """Return a copy of the underlying array."""
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> Tensor:
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}{grad})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------------
    # Backward pass
    # ------------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None):
        """Propagate gradients from this tensor to every reachable leaf.

        Args:
            grad: Seed gradient. Required unless the tensor holds one element.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"Seed gradient shape {grad.shape} does not match {self.shape}")
        Tape.record_order(self).run(self, grad)

    # ------------------------------------------------------------------
    # Operators
    # ------------------------------------------------------------------
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    def __radd__(self, other: Any) -> Tensor:
        return add(_lift(other, self), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, other)

    def __rsub__(self, other: Any) -> Tensor:
        return sub(_lift(other, self), self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    def __rmul__(self, other: Any) -> Tensor:
        return mul(_lift(other, self), self)

    def __truediv__(self, other: Any) -> Tensor:
        return div(self, other)

    def __rtruediv__(self, other: Any) -> Tensor:
        return div(_lift(other, self), self)

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __pow__(self, exponent: float) -> Tensor:
        return power(self, exponent)

    def __matmul__(self, other: Any) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def sum(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape: int | Sequence[int]) -> Tensor:
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = tuple(shape[0])
        return reshape(self, tuple(shape))  # type: ignore[arg-type]

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes or None)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)

    def abs(self) -> Tensor:
        return absolute(self)


class Tape:
    """Topologically ordered record of the operations that produced an output."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def record_order(cls, output: Tensor) -> Tape:
        """Collect every grad-requiring node reachable from ``output``, inputs first."""
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited or not node.requires_grad:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))
        return cls(order)

    def run(self, output: Tensor, seed: np.ndarray):
        """Apply each backward closure once, in reverse topological order."""
        grads: dict[int, np.ndarray] = {id(output): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            assert node._backward is not None
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads, strict=True):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# ----------------------------------------------------------------------
# Helpers
# ----------------------------------------------------------------------
def _lift(value: Any, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value), dtype=like.data.dtype)


def as_tensor(value: Any) -> Tensor:
    """Wrap arrays and scalars as constant tensors; pass tensors through."""
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], op: str, backward: BackwardFn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.requires_grad = False
    out._parents = ()
    out._backward = None
    if _state.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    if _state.anomaly and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"Operation '{op}' produced non-finite values")
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} cannot be broadcast") from None


def _normalize_axes(axis: int | Sequence[int] | None, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(sorted(a % ndim for a in axes))


# ----------------------------------------------------------------------
# Elementwise arithmetic
# ----------------------------------------------------------------------
def add(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), "add", backward)


def sub(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), "sub", backward)


def mul(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), "mul", backward)


def div(a: Any, b: Any) -> Tensor:
    a = as_tensor(a)
    b = _lift(b, a)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), "div", backward)


def power(x: Tensor, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ContractError("power() supports scalar exponents only")
    p = float(exponent)

    def backward(g):
        return (g * p * np.power(x.data, p - 1.0),)

    return _result(np.power(x.data, p), (x,), "pow", backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _result(out, (x,), "exp", backward)


def log(x: Tensor) -> Tensor:
    def backward(g):
        return (g / x.data,)

    return _result(np.log(x.data), (x,), "log", backward)


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _result(out, (x,), "sqrt", backward)


def absolute(x: Tensor) -> Tensor:
    def backward(g):
        return (g * np.sign(x.data),)

    return _result(np.abs(x.data), (x,), "abs", backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    inner = _GELU_C * (x.data + 0.044715 * x.data**3)
    t = np.tanh(inner)
    out = 0.5 * x.data * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t * t) * d_inner),)

    return _result(out.astype(x.dtype, copy=False), (x,), "gelu", backward)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), evaluated without overflow."""
    out = np.log1p(np.exp(-np.abs(x.data))) + np.maximum(x.data, 0.0)

    def backward(g):
        return (g * 0.5 * (1.0 + np.tanh(0.5 * x.data)),)

    return _result(out, (x,), "softplus", backward)


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Elementwise Huber penalty: 0.5 x^2 inside ``delta``, linear outside."""
    if delta <= 0:
        raise ContractError(f"Huber delta must be positive, got {delta}")
    ax = np.abs(x.data)
    out = np.where(ax <= delta, 0.5 * x.data**2, delta * (ax - 0.5 * delta))

    def backward(g):
        return (g * np.clip(x.data, -delta, delta),)

    return _result(out.astype(x.dtype, copy=False), (x,), "huber", backward)


# ----------------------------------------------------------------------
# Linear algebra
# ----------------------------------------------------------------------
def matmul(a: Any, b: Any) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, n]``."""
    a = as_tensor(a)
    b = _lift(b, a)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(
            f"matmul batch dimensions not broadcastable: shapes {a.shape} and {b.shape}"
        ) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(np.matmul(a.data, b.data), (a, b), "matmul", backward)


# ----------------------------------------------------------------------
# Reductions
# ----------------------------------------------------------------------
def tensor_sum(
    x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False
) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims, dtype=np.float64).astype(x.dtype)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), (x,), "sum", backward)


def mean(x: Tensor, axis: int | Sequence[int] | None = None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tensor_sum(x, axes, keepdims) * (1.0 / max(count, 1))


# ----------------------------------------------------------------------
# Shape manipulation
# ----------------------------------------------------------------------
def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"Cannot reshape tensor of shape {x.shape} into {shape}") from None

    def backward(g):
        return (g.reshape(x.shape),)

    return _result(out, (x,), "reshape", backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    perm = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(a % x.ndim for a in perm) != list(range(x.ndim)):
        raise ShapeError(f"Invalid permutation {perm} for shape {x.shape}")
    inverse = tuple(int(i) for i in np.argsort(perm))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _result(np.transpose(x.data, perm), (x,), "transpose", backward)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"Cannot broadcast shape {x.shape} to {shape}") from None

    def backward(g):
        return (_unbroadcast(g, x.shape),)

    return _result(out, (x,), "broadcast_to", backward)


def _is_basic_index(index: Any) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Slicing and integer-array indexing."""
    out = x.data[index]
    basic = _is_basic_index(index) or (
        isinstance(index, np.ndarray) and index.dtype == np.bool_
    )

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out), (x,), "slice", backward)


def concatenate(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concatenate needs at least one tensor")
    tensors = tuple(as_tensor(t) for t in tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis
        ):
            raise ShapeError(
                f"concatenate along axis {axis}: shapes {tensors[0].shape} and {t.shape} differ"
            )
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tensors, "concatenate", backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("stack needs at least one tensor")
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % (tensors[0].ndim + 1)
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concatenate(expanded, axis=axis)


def embedding(weight: Tensor, indices: np.ndarray | Sequence[int]) -> Tensor:
    """Look up rows of ``weight`` (shape [V, D]) for integer ``indices``."""
    idx = np.asarray(indices, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"Embedding table must be rank 2, got shape {weight.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= weight.shape[0]):
        raise ContractError(
            f"Embedding index out of range [0, {weight.shape[0]}): {idx.min()}..{idx.max()}"
        )

    def backward(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(weight.data[idx], (weight,), "embedding", backward)


# ----------------------------------------------------------------------
# Normalization and attention
# ----------------------------------------------------------------------
def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Softmax stabilized by subtracting the max along ``axis``."""
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / np.sum(e, axis=axis, keepdims=True, dtype=np.float64).astype(x.dtype)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (x,), "softmax", backward)


def layernorm(
    x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = 1e-5
) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=-1, keepdims=True)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    out = xhat.copy()
    g_arr = gain.data if gain is not None else None
    if g_arr is not None:
        out = out * g_arr
    if bias is not None:
        out = out + bias.data
    parents = tuple(t for t in (x, gain, bias) if t is not None)

    def backward(g):
        g64 = g.astype(np.float64)
        dxhat = g64 * g_arr if g_arr is not None else g64
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        grads: list[np.ndarray] = [dx.astype(x.dtype)]
        if gain is not None:
            grads.append(_unbroadcast(g64 * xhat, gain.shape).astype(gain.dtype))
        if bias is not None:
            grads.append(_unbroadcast(g64, bias.shape).astype(bias.dtype))
        return tuple(grads)

    return _result(out.astype(x.dtype), parents, "layernorm", backward)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False
) -> Tensor | tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError(
            f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}"
        )
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * scale
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple[int, ...]:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)
