"""Reverse-mode automatic differentiation over dense numpy arrays.

A Tensor wraps an ndarray plus the recording needed to backpropagate:
its parent tensors and a closure mapping the output gradient to parent
gradients. backward() walks the graph once in reverse topological
order. The op set is exactly what the segment transformer needs; there
is no broadcasting cleverness beyond numpy's own rules, and gradients
for broadcast operands are reduced back to the operand shape.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NumericError, ShapeMismatch
from . import kernels as K

_FLOAT_DTYPES = (np.float32, np.float64)
_grad_enabled = True


@contextmanager
def no_grad():
    """Disables graph recording inside the block (inference paths)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; every op lives in a module-level function below
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Parameter(Tensor):
    """A named trainable tensor; gradient is None when zeroed."""

    __slots__ = ("name",)

    def __init__(self, name: str, data):
        super().__init__(data, requires_grad=True)
        self.requires_grad = True  # parameters train even if created under no_grad
        self.name = name


def _as_tensor(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _record(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sums a broadcast gradient back down to the operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeMismatch(f"add: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeMismatch(f"sub: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record(data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeMismatch(f"mul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record(data, (a, b), backward_fn)


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    factor = float(factor)
    data = a.data * factor

    def backward_fn(g):
        return (g * factor,)

    return _record(data, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeMismatch(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record(data, (a, b), backward_fn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _record(data, (a,), backward_fn)


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise ShapeMismatch(f"transpose: axes {axes} do not permute shape {a.shape}")
    data = a.data.transpose(axes)
    inverse = tuple(int(i) for i in np.argsort(axes))

    def backward_fn(g):
        return (g.transpose(inverse),)

    return _record(data, (a,), backward_fn)


def take_rows(a, n: int) -> Tensor:
    """First n rows of a 2-D tensor (position-table lookup)."""
    a = _as_tensor(a)
    if a.data.ndim != 2 or not 0 < n <= a.shape[0]:
        raise ShapeMismatch(f"take_rows: cannot take {n} rows from shape {a.shape}")
    data = a.data[:n]

    def backward_fn(g):
        full = np.zeros_like(a.data)
        full[:n] = g
        return (full,)

    return _record(data, (a,), backward_fn)


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    data = np.asarray(a.data.sum())

    def backward_fn(g):
        return (np.full(a.shape, g, dtype=a.data.dtype),)

    return _record(data, (a,), backward_fn)


# ---------------------------------------------------------------------------
# neural ops backed by the kernel lane


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    data = K.gelu_forward(a.data)

    def backward_fn(g):
        return (K.gelu_backward(a.data, g),)

    return _record(data, (a,), backward_fn)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1] if x.data.ndim else 0
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: gain {gain.shape} and bias {bias.shape} must be ({d},) for input {x.shape}"
        )
    data, mean, rstd = K.layer_norm_forward(x.data, gain.data, bias.data, eps)

    def backward_fn(g):
        return K.layer_norm_backward(x.data, gain.data, mean, rstd, g)

    return _record(data, (x, gain, bias), backward_fn)


def softmax_last_axis(a) -> Tensor:
    """Plain (unmasked) softmax over the last axis."""
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    expd = np.exp(shifted)
    data = expd / expd.sum(axis=-1, keepdims=True)

    def backward_fn(g):
        inner = (data * g).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _record(data, (a,), backward_fn)


def causal_softmax(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeMismatch(f"causal_softmax: expects square last axes, got {a.shape}")
    data = K.causal_softmax_forward(a.data)

    def backward_fn(g):
        return (K.causal_softmax_backward(data, g),)

    return _record(data, (a,), backward_fn)


def causal_masked_attention(q, k, v, heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    q, k, v: (batch, positions, dim) with dim divisible by heads.
    Output at position j depends only on inputs at positions <= j.
    """
    q, k, v = _as_tensor(q), _as_tensor(k), _as_tensor(v)
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 3:
        raise ShapeMismatch(
            f"causal_masked_attention: q/k/v must share a 3-D shape, got {q.shape}, {k.shape}, {v.shape}"
        )
    batch, n, dim = q.shape
    if dim % heads != 0:
        raise ShapeMismatch(f"causal_masked_attention: dim {dim} not divisible by heads {heads}")
    head_dim = dim // heads

    def split(t: Tensor) -> Tensor:
        return transpose(reshape(t, (batch, n, heads, head_dim)), (0, 2, 1, 3))

    qh, kh, vh = split(q), split(k), split(v)
    scores = scale(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / math.sqrt(head_dim))
    probs = causal_softmax(scores)
    context = matmul(probs, vh)
    return reshape(transpose(context, (0, 2, 1, 3)), (batch, n, dim))


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor) -> None:
    """Accumulates gradients of a scalar loss into every reachable tensor.

    Gradients add across consumers; parameters keep their gradient in
    .grad until zero_grad. Running backward twice on the same loss is
    an error, as is a non-finite or non-scalar loss.
    """
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data):
        raise NumericError(f"backward: non-finite loss {float(loss.data)}")
    if loss._consumed:
        raise NumericError("backward: graph already consumed; rebuild the loss before calling again")
    loss._consumed = True
    if not loss.requires_grad:
        return

    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward_fn is None or node.grad is None:
            continue
        parent_grads = node._backward_fn(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if g.dtype != parent.data.dtype:
                g = g.astype(parent.data.dtype)
            if parent.grad is None:
                parent.grad = g
            else:
                # allocate rather than mutate: g may alias another tensor's grad
                parent.grad = parent.grad + g
        if node is not loss:
            node.grad = None  # free intermediate gradients eagerly


def zero_grad(params: Sequence[Parameter]) -> None:
    for p in params:
        p.grad = None
