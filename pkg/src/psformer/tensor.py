"""Dense tensors with tape-based reverse-mode differentiation.

Only the operations the forecasting model needs are provided. Binary
elementwise ops require identical shapes; the only broadcasting is scalar
scaling and the explicit ``add_bias`` op.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = mean(matmul(x, w))
    tape.backward(loss)
    w.grad

Matmul goes through numpy's BLAS. Results are deterministic for a fixed
BLAS thread count; changing the thread count may change the last bits.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Backward was called outside its contract."""


class Tensor:
    """A numpy array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or DEFAULT_DTYPE, copy=True)
        if arr.ndim > 3:
            raise ShapeError(f"tensors have at most 3 axes, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None

    @classmethod
    def _wrap(cls, arr, requires_grad=False):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of differentiable operations.

    Operations are recorded on the innermost active tape (entered with
    ``with``). Nodes are appended as ops execute, so the list is already in
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward):
        self.nodes.append(_Node(tuple(inputs), output, backward))

    def backward(self, loss: Tensor):
        """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
        if loss.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(node.output is loss for node in self.nodes):
            raise TapeError("loss was not produced on this tape")

        grads = {id(loss): np.ones_like(loss.data)}
        reached = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    reached[key] = t
            _accumulate(node.output, g)
        # whatever is left belongs to leaves
        for key, g in grads.items():
            _accumulate(reached[key], g)

    def clear(self):
        self.nodes.clear()


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype).reshape(t.data.shape)
    # never in place: g may be shared with other tensors' gradients
    t.grad = g if t.grad is None else t.grad + g


def _tape_for(*inputs):
    if not _ACTIVE:
        return None
    if any(t.requires_grad for t in inputs):
        return _ACTIVE[-1]
    return None


def custom_op(inputs: Sequence[Tensor], out_data, backward: Callable):
    """Wrap ``out_data`` as a tensor and record ``backward`` for it.

    ``backward`` maps the upstream gradient to a tuple with one entry (or
    None) per input.
    """
    tape = _tape_for(*inputs)
    out = Tensor._wrap(out_data, requires_grad=tape is not None)
    if tape is not None:
        tape.record(inputs, out, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return custom_op((a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return custom_op((a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise (Hadamard) product."""
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return custom_op((a, b), ad * bd, lambda g: (g * bd, g * ad))


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return custom_op((a,), a.data * a.data.dtype.type(s), lambda g: (g * s,))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-K vector to every row of ``x[..., K]``."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")
    lead = tuple(range(x.data.ndim - 1))
    return custom_op((x, b), x.data + b.data, lambda g: (g, g.sum(axis=lead)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Supported layouts: (R,K)@(K,S), (B,R,K)@(K,S) with a shared right
    operand, and batched (B,R,K)@(B,K,S).
    """
    ad, bd = a.data, b.data
    ok = (
        ad.ndim in (2, 3)
        and bd.ndim in (2, 3)
        and ad.shape[-1] == bd.shape[-2]
        and not (bd.ndim == 3 and (ad.ndim != 3 or ad.shape[0] != bd.shape[0]))
    )
    if not ok:
        raise ShapeError(f"matmul: cannot multiply {ad.shape} by {bd.shape}")

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2 and ad.ndim == 3:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return custom_op((a, b), ad @ bd, backward)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    if a.data.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 axes, got {a.shape}")
    return custom_op((a,), np.ascontiguousarray(np.swapaxes(a.data, -1, -2)),
                     lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if math.prod(shape) != a.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    src = a.shape
    return custom_op((a,), a.data.reshape(shape), lambda g: (g.reshape(src),))


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    mask = x.data > 0
    return custom_op((x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GeLU, x * Phi(x), with Phi the standard normal CDF."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT_HALF))
    out = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return custom_op((x,), out, backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax over the last axis, with per-row max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return custom_op((x,), y, backward)


def total(x: Tensor) -> Tensor:
    """Sum of all elements, as a 0-d tensor."""
    shape, dt = x.shape, x.dtype
    return custom_op((x,), np.asarray(x.data.sum(), dtype=dt),
                     lambda g: (np.full(shape, g, dtype=dt),))


def mean(x: Tensor) -> Tensor:
    shape, dt, n = x.shape, x.dtype, x.size
    return custom_op((x,), np.asarray(x.data.mean(), dtype=dt),
                     lambda g: (np.full(shape, g / n, dtype=dt),))
