"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are float64 numpy arrays. A ``Graph`` is a tape: primitives executed
while a graph is active append one node each (in execution order, which is a
valid topological order), and ``backward`` walks the tape once in reverse,
summing gradients across fan-out. Graphs are rebuilt per batch; nothing is
retained between them.

Broadcasting is deliberately restricted to row-wise bias addition
((n, d) + (d,)); everything else requires exact shape agreement.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

from .errors import NumericError, ShapeError

_NODE_IDS = itertools.count(1)
_ACTIVE_GRAPH: "Graph | None" = None


class Tensor:
    """Dense float64 array participating in a differentiation graph."""

    __slots__ = ("values", "requires_grad", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.node_id = next(_NODE_IDS)

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(values) -> Tensor:
    """Tensor that never receives gradients."""
    return Tensor(values, requires_grad=False)


def parameter(values) -> Tensor:
    """Leaf tensor that accumulates gradients."""
    return Tensor(values, requires_grad=True)


class _Node:
    __slots__ = ("out_id", "input_ids", "vjp")

    def __init__(self, out_id, input_ids, vjp):
        self.out_id = out_id
        self.input_ids = input_ids
        self.vjp = vjp  # grad_out -> tuple of grads aligned with input_ids


class Graph:
    """Topologically ordered tape of primitive applications.

    Use as a context manager around one forward pass:

        with Graph() as g:
            loss = ...
        grads = backward(g, loss)
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grad_ids: set[int] = set()

    def __enter__(self):
        global _ACTIVE_GRAPH
        if _ACTIVE_GRAPH is not None:
            raise RuntimeError("a Graph is already active; graphs do not nest")
        _ACTIVE_GRAPH = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_GRAPH
        _ACTIVE_GRAPH = None
        return False


def _record(out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    g = _ACTIVE_GRAPH
    if g is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        ids = tuple(t.node_id if t.requires_grad else 0 for t in inputs)
        g.nodes.append(_Node(out.node_id, ids, vjp))
        g.grad_ids.update(i for i in ids if i)
        g.grad_ids.add(out.node_id)
    return out


def _shape_check(name: str, ok: bool, *shapes):
    if not ok:
        raise ShapeError(f"{name}: incompatible shapes {' and '.join(str(s) for s in shapes)}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("matmul", a.values.ndim == 2 and b.values.ndim == 2
                 and a.values.shape[1] == b.values.shape[0], a.shape, b.shape)
    out = Tensor(a.values @ b.values)

    def vjp(g):
        return g @ b.values.T, a.values.T @ g

    return _record(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    bias = a.values.ndim == 2 and b.values.ndim == 1 and a.values.shape[1] == b.values.shape[0]
    _shape_check("add", bias or a.values.shape == b.values.shape, a.shape, b.shape)
    out = Tensor(a.values + b.values)

    def vjp(g):
        return g, (g.sum(axis=0) if bias else g)

    return _record(out, (a, b), vjp)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _shape_check("multiply", a.values.shape == b.values.shape, a.shape, b.shape)
    out = Tensor(a.values * b.values)

    def vjp(g):
        return g * b.values, g * a.values

    return _record(out, (a, b), vjp)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.values * c)
    return _record(out, (a,), lambda g: (g * c,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the last axis (default) or axis 0."""
    if axis not in (-1, 0):
        raise ShapeError(f"concat: axis must be -1 or 0, got {axis}")
    ndim = tensors[0].values.ndim
    fixed = (lambda s: s[:-1]) if axis == -1 else (lambda s: s[1:])
    lead = fixed(tensors[0].values.shape)
    _shape_check("concat", all(t.values.ndim == ndim and fixed(t.values.shape) == lead
                               for t in tensors), *[t.shape for t in tensors])
    out = Tensor(np.concatenate([t.values for t in tensors], axis=axis))
    widths = [t.values.shape[axis] for t in tensors]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        if axis == -1:
            return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(widths)))
        return tuple(g[edges[i]:edges[i + 1]] for i in range(len(widths)))

    return _record(out, tuple(tensors), vjp)


def take_slice(a: Tensor, key) -> Tensor:
    """Basic slicing; ``key`` is a slice or tuple of slices (views only)."""
    out = Tensor(a.values[key])

    def vjp(g):
        full = np.zeros_like(a.values)
        full[key] = g
        return (full,)

    return _record(out, (a,), vjp)


def transpose(a: Tensor) -> Tensor:
    _shape_check("transpose", a.values.ndim == 2, a.shape)
    out = Tensor(a.values.T)
    return _record(out, (a,), lambda g: (g.T,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    v = a.values
    y = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                 np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.values)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.values))
    return _record(out, (a,), lambda g: (g / a.values,))


def gather_rows(table: Tensor, indices) -> Tensor:
    """Embedding lookup: rows of a 2-D table selected by integer index."""
    idx = np.asarray(indices, dtype=np.int64)
    _shape_check("gather_rows", table.values.ndim == 2, table.shape)
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")
    out = Tensor(table.values[idx])

    def vjp(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        return (full,)

    return _record(out, (table,), vjp)


def row_sum(a: Tensor) -> Tensor:
    """Sum along the last axis, keeping it as width 1."""
    _shape_check("row_sum", a.values.ndim == 2, a.shape)
    out = Tensor(a.values.sum(axis=-1, keepdims=True))
    width = a.values.shape[-1]
    return _record(out, (a,), lambda g: (np.repeat(g, width, axis=-1),))


def sum_all(a: Tensor) -> Tensor:
    """Sum every entry into a scalar (shape ())."""
    out = Tensor(a.values.sum())
    return _record(out, (a,), lambda g: (np.full_like(a.values, float(g)),))


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    v = a.values
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(p)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _record(out, (a,), vjp)


def masked_fill(a: Tensor, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is nonzero with ``value``."""
    m = np.asarray(mask, dtype=np.float64)
    _shape_check("masked_fill", m.shape == a.values.shape, a.shape, m.shape)
    out = Tensor(np.where(m != 0, value, a.values))
    return _record(out, (a,), lambda g: (g * (m == 0),))


PRIMITIVES = ("matmul", "add", "multiply", "scale", "concat", "take_slice", "transpose",
              "tanh", "sigmoid", "exp", "log", "gather_rows", "row_sum", "sum_all",
              "softmax", "masked_fill")


# ---------------------------------------------------------------------------
# compositions
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return add(matmul(x, w), b)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.values.size)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def backward(graph: Graph, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> dict:
    """Accumulated gradients of a scalar ``loss`` over the tape.

    Returns a map node_id -> gradient array, covering every tensor on the
    tape that required gradients. Tensors in ``wrt`` are always present;
    those off every path to the loss get zero gradients.
    """
    if loss.values.shape != ():
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.values.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(())}
    for node in reversed(graph.nodes):
        g = grads.get(node.out_id)
        if g is None:
            continue
        for input_id, input_grad in zip(node.input_ids, node.vjp(g)):
            if input_id == 0:
                continue
            acc = grads.get(input_id)
            grads[input_id] = input_grad if acc is None else acc + input_grad
    if wrt is not None:
        for t in wrt:
            if t.node_id not in grads:
                grads[t.node_id] = np.zeros_like(t.values)
    return grads


def grad_of(grads: dict, t: Tensor) -> np.ndarray:
    return grads.get(t.node_id, np.zeros_like(t.values))


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------

def finite_difference_check(f, xs, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is called as ``f(*xs)`` and must return a scalar Tensor built from
    the primitives above. ``xs`` tensors are perturbed in place entry by
    entry; relative error uses a unit floor so near-zero gradients compare
    absolutely.
    """
    if isinstance(xs, Tensor):
        xs = [xs]
    with Graph() as g:
        loss = f(*xs)
    grads = backward(g, loss, wrt=xs)
    worst = 0.0
    for x in xs:
        analytic = grad_of(grads, x)
        for j in range(x.values.size):
            orig = x.values.flat[j]
            x.values.flat[j] = orig + eps
            hi = float(f(*xs).values)
            x.values.flat[j] = orig - eps
            lo = float(f(*xs).values)
            x.values.flat[j] = orig
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic.flat[j])
            err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
            worst = max(worst, err)
    return worst


def check_finite(name: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        raise NumericError(f"non-finite values in {name}")
