"""Reverse-mode automatic differentiation over dense numpy arrays.

A :class:`Tensor` wraps an ndarray plus an optional graph node. Nodes are
recorded eagerly while an operation runs, but only when gradients are
enabled and at least one operand requires them. :func:`backward` walks the
recorded graph once in reverse topological order, accumulates gradients by
summation, returns them for the requires-grad leaves, and releases the
graph so every forward pass starts from a clean slate.

Arrays are float32 by default; passing ``dtype=np.float64`` at creation
switches a computation to double precision, which the gradient-check tests
rely on.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ContractError, NormalizationError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

# per-thread so parallel inference cannot toggle recording under a trainer
_state = threading.local()


def _grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the context (used for inference)."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class _Node:
    __slots__ = ("op", "parents", "backward")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


class Tensor:
    """Dense numeric array, optionally tracked by the autograd graph."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad=False, dtype=None):
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, (np.ndarray, np.generic)) and data.dtype in _FLOAT_DTYPES:
            arr = np.asarray(data)
        else:
            arr = np.asarray(data, dtype=np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"

    # arithmetic sugar; python scalars become constants of matching dtype
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, scale(_wrap(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _result(data, op, parents, backward_fn):
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _Node(op, tuple(parents), backward_fn)
    return out


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _unbroadcast(grad, shape):
    """Sum a broadcast gradient back down to the original operand shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    b = _wrap(b, a.dtype)
    _check_broadcast("add", a, b)
    data = a.data + b.data

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(data, "add", (a, b), backward_fn)


def mul(a, b):
    b = _wrap(b, a.dtype)
    _check_broadcast("mul", a, b)
    data = a.data * b.data

    def backward_fn(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _result(data, "mul", (a, b), backward_fn)


def div(a, b):
    b = _wrap(b, a.dtype)
    _check_broadcast("div", a, b)
    data = a.data / b.data

    def backward_fn(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _result(data, "div", (a, b), backward_fn)


def scale(a, c):
    c = float(c)
    data = a.data * c

    def backward_fn(g):
        return (g * c,)

    return _result(data, "scale", (a,), backward_fn)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    data = a.data @ b.data

    def backward_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, "matmul", (a, b), backward_fn)


def relu(a):
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        # subgradient at exactly zero is defined as zero
        return (g * (a.data > 0),)

    return _result(data, "relu", (a,), backward_fn)


def exp(a):
    data = np.exp(a.data)

    def backward_fn(g):
        return (g * data,)

    return _result(data, "exp", (a,), backward_fn)


def log(a):
    data = np.log(a.data)

    def backward_fn(g):
        return (g / a.data,)

    return _result(data, "log", (a,), backward_fn)


def _expand_reduced(g, in_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, in_shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, in_shape)


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors the numpy name
    data = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _result(data, "sum", (a,), backward_fn)


def mean(a, axis=None, keepdims=False):
    data = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.data.size if axis is None else a.shape[axis]

    def backward_fn(g):
        return (_expand_reduced(g, a.shape, axis, keepdims) / count,)

    return _result(data, "mean", (a,), backward_fn)


def max(a, axis=None):  # noqa: A001 - mirrors the numpy name
    """Max-reduce; on ties the gradient goes to the lowest index."""
    if a.data.size == 0:
        raise ShapeError("max: empty input")
    data = np.max(a.data, axis=axis)

    def backward_fn(g):
        gx = np.zeros_like(a.data)
        if axis is None:
            gx.flat[np.argmax(a.data)] = g
        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _result(data, "max", (a,), backward_fn)


def transpose(a):
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    data = a.data.T

    def backward_fn(g):
        return (g.T,)

    return _result(data, "transpose", (a,), backward_fn)


def reshape(a, shape):
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape: cannot view shape {a.shape} as {tuple(shape)}")
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _result(data, "reshape", (a,), backward_fn)


def clip(a, lo, hi):
    data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        return (g * ((a.data >= lo) & (a.data <= hi)),)

    return _result(data, "clip", (a,), backward_fn)


def softmax_rows(a):
    """Row-wise softmax of a matrix, numerically stabilized."""
    if a.ndim != 2:
        raise ShapeError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    z = a.data - np.max(a.data, axis=1, keepdims=True)
    e = np.exp(z)
    data = e / np.sum(e, axis=1, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * data, axis=1, keepdims=True)
        return (data * (g - dot),)

    return _result(data, "softmax_rows", (a,), backward_fn)


def l2norm_rows(a):
    """Scale each row of a matrix to unit Euclidean norm."""
    if a.ndim != 2:
        raise ShapeError(f"l2norm_rows: expected a matrix, got shape {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1, keepdims=True))
    zero = np.flatnonzero(norms.reshape(-1) == 0)
    if zero.size:
        raise NormalizationError(f"l2norm_rows: row {int(zero[0])} has zero norm")
    data = a.data / norms

    def backward_fn(g):
        dot = np.sum(g * data, axis=1, keepdims=True)
        return ((g - data * dot) / norms,)

    return _result(data, "l2norm_rows", (a,), backward_fn)


def _axis_coords(in_extent, out_extent, dtype):
    """Source indices and blend weights for 1-D align-corners interpolation."""
    if out_extent == 1 or in_extent == 1:
        src = np.zeros(out_extent)
    else:
        src = np.arange(out_extent) * ((in_extent - 1) / (out_extent - 1))
    i0 = np.minimum(np.floor(src).astype(np.int64), in_extent - 1)
    i1 = np.minimum(i0 + 1, in_extent - 1)
    w = (src - i0).astype(dtype)
    return i0, i1, w


def bilinear_upsample(a, size):
    """Resize a 2-D map to ``size`` with align-corners bilinear interpolation."""
    if a.ndim != 2:
        raise ShapeError(f"bilinear_upsample: expected a matrix, got shape {a.shape}")
    gh, gw = a.shape
    if gh == 0 or gw == 0:
        raise ShapeError("bilinear_upsample: empty input map")
    h, w = int(size[0]), int(size[1])
    if h < gh or w < gw:
        raise ShapeError(f"bilinear_upsample: target {(h, w)} smaller than input {a.shape}")
    y0, y1, wy = _axis_coords(gh, h, a.dtype.type)
    x0, x1, wx = _axis_coords(gw, w, a.dtype.type)
    wy = wy[:, None]
    wx = wx[None, :]
    src = a.data
    top = (1 - wx) * src[np.ix_(y0, x0)] + wx * src[np.ix_(y0, x1)]
    bot = (1 - wx) * src[np.ix_(y1, x0)] + wx * src[np.ix_(y1, x1)]
    data = (1 - wy) * top + wy * bot

    def backward_fn(g):
        gx = np.zeros_like(src)
        np.add.at(gx, np.ix_(y0, x0), g * (1 - wy) * (1 - wx))
        np.add.at(gx, np.ix_(y0, x1), g * (1 - wy) * wx)
        np.add.at(gx, np.ix_(y1, x0), g * wy * (1 - wx))
        np.add.at(gx, np.ix_(y1, x1), g * wy * wx)
        return (gx,)

    return _result(data, "bilinear_upsample", (a,), backward_fn)


def backward(loss):
    """Propagate gradients from a scalar loss back to requires-grad leaves.

    Returns a mapping from each reachable leaf tensor to a gradient tensor
    of the same shape. Gradients from multiple uses of a leaf accumulate by
    summation. Graph nodes are released as they are consumed, so the graph
    cannot be replayed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward: loss is not connected to any requires-grad tensor")

    # iterative postorder traversal; graphs can be deep at batch scale
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        tensor, processed = stack.pop()
        if processed:
            topo.append(tensor)
            continue
        if id(tensor) in visited:
            continue
        visited.add(id(tensor))
        stack.append((tensor, True))
        if tensor.node is not None:
            for parent in tensor.node.parents:
                if id(parent) not in visited:
                    stack.append((parent, False))

    grads = {loss: np.ones_like(loss.data)}
    leaf_grads = {}
    for tensor in reversed(topo):
        g = grads.pop(tensor, None)
        if g is None:
            continue
        if tensor.node is None:
            if tensor.requires_grad:
                leaf_grads[tensor] = g
            continue
        parent_grads = tensor.node.backward(g)
        for parent, pg in zip(tensor.node.parents, parent_grads):
            if pg is None or not (parent.requires_grad or parent.node is not None):
                continue
            if parent in grads:
                grads[parent] = grads[parent] + pg
            else:
                grads[parent] = pg
        tensor.node = None
    return {leaf: Tensor(np.array(g, copy=True)) for leaf, g in leaf_grads.items()}
