"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every operation records a node holding its inputs and a backward rule.
Backward rules are themselves written with differentiable operations, so
gradients computed with ``create_graph=True`` can be differentiated again.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from ..errors import NaNDetected, ShapeMismatch

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(flag)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class Tensor:
    """A float64 array optionally attached to the autodiff graph."""

    __slots__ = ("data", "requires_grad", "_inputs", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._inputs: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf" if requires_grad else "const"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_item(self)

    def detach(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data, requires_grad=requires_grad)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _fail_item(t):
    raise ShapeMismatch(f"item() needs a single element, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data, inputs: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._inputs = inputs
        out._backward = backward
    return out


def _check_elementwise(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ "
                            "(only scalar-tensor broadcasting is allowed)")


def _unbroadcast(g: Tensor, shape) -> Tensor:
    if g.shape == shape:
        return g
    # only scalar broadcasting is permitted
    return sum_(g)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _record(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(mul(g, b), a.shape) if a.requires_grad else None
        gb = _unbroadcast(mul(g, a), b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b, "div")

    def backward(g):
        ga = _unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape)
        return ga, gb

    return _record(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (neg(g),), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (mul(g, mul(power(a, p - 1.0), p)),)

    return _record(a.data ** p, (a,), backward, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(a.data)

    def backward(g):
        return (mul(g, out),)

    out = _record(data, (a,), backward, "exp")
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def tanh(a) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _record(np.tanh(a.data), (a,), backward, "tanh")
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    data = np.exp(-np.logaddexp(0.0, -a.data))

    def backward(g):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _record(data, (a,), backward, "sigmoid")
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    return _record(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


def softplus(a) -> Tensor:
    a = as_tensor(a)
    return _record(np.logaddexp(0.0, a.data), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def square(a) -> Tensor:
    return mul(a, a)


# ---------------------------------------------------------------------------
# linear algebra and shape manipulation


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def backward(g):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), backward, "matmul")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (transpose(g, inverse),), "transpose")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(f"reshape: cannot reshape {a.shape} into {shape}") from exc
    return _record(data, (a,), lambda g: (reshape(g, a.shape),), "reshape")


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the only non-scalar broadcasting op."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError as exc:
        raise ShapeMismatch(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    lead = len(shape) - a.ndim
    axes = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(a.shape) if n == 1 and shape[lead + i] != 1)

    def backward(g):
        return (reshape(sum_(g, axes), a.shape) if axes else g,)

    return _record(data, (a,), backward, "broadcast_to")


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    kept = a.data.sum(axis=axis, keepdims=True).shape

    def backward(g):
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _record(data, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    total = sum_(a, axis, keepdims)
    n = a.size // max(total.size, 1) if axis is not None else a.size
    return mul(total, 1.0 / n)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    if not tensors:
        raise ShapeMismatch("concat: no inputs")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
                s != r for i, (s, r) in enumerate(zip(t.shape, tensors[0].shape)) if i != ax):
            raise ShapeMismatch(f"concat: shapes {[x.shape for x in tensors]} along axis {axis}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    """Slicing and integer-array gathering (numpy indexing semantics)."""
    a = as_tensor(a)
    try:
        data = a.data[index]
    except IndexError as exc:
        raise ShapeMismatch(f"slice: index {index!r} invalid for shape {a.shape}") from exc
    return _record(np.array(data, copy=True), (a,), lambda g: (embed(g, index, a.shape),), "slice")


def embed(g, index, shape) -> Tensor:
    """Adjoint of ``getitem``: scatter-add ``g`` into zeros of ``shape``."""
    g = as_tensor(g)
    data = np.zeros(shape)
    if _is_basic(index):
        data[index] += g.data
    else:
        np.add.at(data, index, g.data)
    return _record(data, (g,), lambda h: (getitem(h, index),), "embed")


def conv1d_dilated(x, kernel, dilation: int = 1, padding: str = "causal") -> Tensor:
    """1-D dilated convolution (cross-correlation) over the last axis.

    ``x`` is ``(C_in, T)`` or ``(B, C_in, T)``; ``kernel`` is ``(C_out, C_in, K)``.
    Tap ``j`` of an output at time ``t`` reads ``x[t + j*dilation]`` after
    padding, so with ``padding="causal"`` the last tap is the current sample
    and the output keeps length ``T``; ``"valid"`` gives ``T - (K-1)*dilation``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if dilation < 1:
        raise ShapeMismatch(f"conv1d_dilated: dilation must be >= 1, got {dilation}")
    batched = x.ndim == 3
    if not batched:
        if x.ndim != 2:
            raise ShapeMismatch(f"conv1d_dilated: input must be (C_in, T) or (B, C_in, T), got {x.shape}")
        x = reshape(x, (1,) + x.shape)
    if kernel.ndim != 3 or kernel.shape[1] != x.shape[1]:
        raise ShapeMismatch(f"conv1d_dilated: kernel {kernel.shape} incompatible with input {x.shape}")
    c_out, c_in, k = kernel.shape
    span = (k - 1) * dilation
    if padding == "causal":
        if span:
            x = concat([Tensor(np.zeros(x.shape[:2] + (span,))), x], axis=2)
    elif padding != "valid":
        raise ValueError(f"unknown padding {padding!r}")
    b, _, t_pad = x.shape
    t_out = t_pad - span
    if t_out < 1:
        raise ShapeMismatch(f"conv1d_dilated: input length {t_pad} too short for span {span}")
    taps = [getitem(x, (slice(None), slice(None), slice(j * dilation, j * dilation + t_out)))
            for j in range(k)]
    cols = concat(taps, axis=1) if k > 1 else taps[0]          # (B, K*C_in, T')
    cols = reshape(transpose(cols, (0, 2, 1)), (b * t_out, k * c_in))
    w = reshape(transpose(kernel, (2, 1, 0)), (k * c_in, c_out))
    out = transpose(reshape(matmul(cols, w), (b, t_out, c_out)), (0, 2, 1))
    return out if batched else reshape(out, (c_out, t_out))


# ---------------------------------------------------------------------------
# reverse sweep


def graph_of(output: Tensor) -> list[Tensor]:
    """Topologically ordered records reachable from ``output`` (inputs first)."""
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node._inputs:
            if inp.requires_grad and id(inp) not in seen:
                stack.append((inp, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], create_graph: bool = False):
    """Gradients of scalar ``output`` with respect to ``inputs``.

    Returns ``(grads, disconnected)`` where ``disconnected`` lists the
    positions of inputs the output does not depend on (their gradient is 0).
    """
    if output.size != 1:
        raise ShapeMismatch(f"grad: output must be scalar, got shape {output.shape}")
    if not np.all(np.isfinite(output.data)):
        raise NaNDetected(f"non-finite loss value {output.data!r}")
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        grads[id(output)] = Tensor(np.ones_like(output.data))
        with set_grad_enabled(create_graph):
            for node in reversed(graph_of(output)):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for inp, gi in zip(node._inputs, node._backward(g)):
                    if gi is None or not inp.requires_grad:
                        continue
                    prev = grads.get(id(inp))
                    grads[id(inp)] = gi if prev is None else add(prev, gi)
    result, disconnected = [], []
    for i, t in enumerate(inputs):
        g = grads.get(id(t))
        if g is None:
            disconnected.append(i)
            g = Tensor(np.zeros(t.shape))
        elif not np.all(np.isfinite(g.data)):
            raise NaNDetected(f"non-finite gradient for input {i}")
        result.append(g)
    return result, disconnected
