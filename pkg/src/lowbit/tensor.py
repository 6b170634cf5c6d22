"""Minimal reverse-mode autodiff over dense numpy arrays.

Training storage is float32; float64 tensors are supported so tests can run
finite-difference oracles at full precision. All stochastic choices happen
outside the graph, so a fixed seed gives bit-identical forward and backward
results.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

from .errors import GraphError, ShapeError

_node_ids = itertools.count()
_grad_enabled = True

FLOAT_DTYPES = (np.float32, np.float64)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled():
    return _grad_enabled


class Tensor:
    """A dense float array plus an optional gradient and autograd history.

    ``node_id`` is unique per node; ``_parents``/``_backward`` record how the
    node was produced. Leaves have no parents. Gradients accumulate additively
    when a tensor fans out to several consumers.
    """

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None):
        data = np.asarray(data)
        if data.dtype not in FLOAT_DTYPES:
            data = data.astype(np.float32)
        self.data = data
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = next(_node_ids)
        self._parents = tuple(parents)
        self._backward = backward_fn
        self.from_quantizer = False

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        """A graph-free view of the same data."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # -- operator sugar ------------------------------------------------------

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


def _result(data, parents, backward_fn):
    """Wrap an op output, recording the graph only when a grad path exists."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Tensor(data)


def accumulate_grad(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)  # own copy: g may be shared with another parent
    else:
        t.grad += g


def _require_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shapes {a.data.shape} and {b.data.shape} differ")


# -- element-wise and reduction ops -----------------------------------------

def add(a, b):
    _require_same_shape(a, b, "add")

    def backward_fn(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return _result(a.data + b.data, (a, b), backward_fn)


def sub(a, b):
    _require_same_shape(a, b, "sub")

    def backward_fn(g):
        accumulate_grad(a, g)
        accumulate_grad(b, -g)

    return _result(a.data - b.data, (a, b), backward_fn)


def mul(a, b):
    _require_same_shape(a, b, "mul")

    def backward_fn(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return _result(a.data * b.data, (a, b), backward_fn)


def scale(a, c):
    """Multiply by a python float."""
    c = float(c)

    def backward_fn(g):
        accumulate_grad(a, g * c)

    return _result(a.data * np.asarray(c, dtype=a.data.dtype), (a,), backward_fn)


def add_const(a, c):
    c = float(c)

    def backward_fn(g):
        accumulate_grad(a, g)

    return _result(a.data + np.asarray(c, dtype=a.data.dtype), (a,), backward_fn)


def div_by(a, m):
    """Divide by a 0-d tensor (broadcast scalar divisor)."""
    if m.data.shape != ():
        raise ShapeError(f"div_by: divisor must be 0-d, got {m.data.shape}")
    out = a.data / m.data

    def backward_fn(g):
        accumulate_grad(a, g / m.data)
        accumulate_grad(m, np.asarray(-(g * a.data).sum() / (m.data * m.data), dtype=m.data.dtype))

    return _result(out, (a, m), backward_fn)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")

    def backward_fn(g):
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward_fn)


def tanh(a):
    out = np.tanh(a.data)

    def backward_fn(g):
        accumulate_grad(a, g * (1.0 - out * out))

    return _result(out, (a,), backward_fn)


def absolute(a):
    def backward_fn(g):
        accumulate_grad(a, g * np.sign(a.data))

    return _result(np.abs(a.data), (a,), backward_fn)


def reduce_max(a):
    """Maximum over all elements (0-d output); gradient to the first argmax."""
    flat_idx = int(np.argmax(a.data))
    out = a.data.reshape(-1)[flat_idx]

    def backward_fn(g):
        da = np.zeros_like(a.data)
        da.reshape(-1)[flat_idx] = g
        accumulate_grad(a, da)

    return _result(np.asarray(out), (a,), backward_fn)


def clip01(a):
    """Clip to [0, 1]; gradient passes where 0 <= x <= 1 (boundaries included)."""
    mask = (a.data >= 0.0) & (a.data <= 1.0)

    def backward_fn(g):
        accumulate_grad(a, g * mask)

    return _result(np.clip(a.data, 0.0, 1.0), (a,), backward_fn)


def total_sum(a):
    def backward_fn(g):
        accumulate_grad(a, np.full_like(a.data, g))

    return _result(np.asarray(a.data.sum()), (a,), backward_fn)


def mean_all(a):
    n = a.data.size

    def backward_fn(g):
        accumulate_grad(a, np.full_like(a.data, g / n))

    return _result(np.asarray(a.data.mean()), (a,), backward_fn)


def reshape(a, shape):
    shape = tuple(shape)
    old = a.data.shape

    def backward_fn(g):
        accumulate_grad(a, g.reshape(old))

    return _result(a.data.reshape(shape), (a,), backward_fn)


# -- backward driver ---------------------------------------------------------

def _toposort(root):
    """DFS topological order over ancestors of root; rejects cycles."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {root.node_id: GRAY}
    topo = []
    stack = [(root, iter(root._parents))]
    while stack:
        node, parents = stack[-1]
        descended = False
        for p in parents:
            c = color.get(p.node_id, WHITE)
            if c == GRAY:
                raise GraphError("cycle detected in computation graph")
            if c == WHITE:
                color[p.node_id] = GRAY
                stack.append((p, iter(p._parents)))
                descended = True
                break
        if not descended:
            color[node.node_id] = BLACK
            topo.append(node)
            stack.pop()
    return topo


def backward(loss):
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if loss.data.size != 1:
        raise GraphError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = _toposort(loss)
    if loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    else:
        loss.grad += np.ones_like(loss.data)
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
