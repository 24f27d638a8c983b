"""Define-by-run reverse-mode automatic differentiation over float64 arrays.

Every op appends one node to the thread's active :class:`Graph`.  Nodes are
stored in insertion order, so the list is already topologically sorted and
:func:`backward` simply walks it in reverse.  The graph is discarded after each
backward pass; parameters re-register themselves as leaves the next time they
are used.

Broadcasting is restricted to leading-axis expansion: the smaller operand's
shape must be a suffix of the larger one's (``(D,)`` against ``(N, D)``).
Anything else raises :class:`ShapeError`.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "GraphError",
    "Tensor",
    "Graph",
    "parameter",
    "constant",
    "active_graph",
    "reset_graph",
    "no_grad",
    "backward",
    "finite_diff_check",
    "forward_op",
    "OP_KINDS",
]

DTYPE = np.float64
_LOG_FLOOR = 1e-300


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (detached or non-scalar loss)."""


class Node:
    __slots__ = ("kind", "inputs", "backward_fn", "index", "graph", "tensor")

    def __init__(self, kind, inputs, backward_fn, graph, tensor=None):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.graph = graph
        self.index = len(graph.nodes)
        self.tensor = tensor
        graph.nodes.append(self)


class Graph:
    """Append-only tape of nodes; insertion order is topological order."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self):
        return len(self.nodes)


_local = threading.local()


def active_graph() -> Graph:
    g = getattr(_local, "graph", None)
    if g is None:
        g = _local.graph = Graph()
    return g


def reset_graph() -> Graph:
    """Drop the current tape and start a fresh one for this thread."""
    _local.graph = Graph()
    return _local.graph


def _recording() -> bool:
    return not getattr(_local, "no_grad", False)


@contextlib.contextmanager
def no_grad():
    """Evaluate ops as plain array math; nothing is recorded."""
    prev = getattr(_local, "no_grad", False)
    _local.no_grad = True
    try:
        yield
    finally:
        _local.no_grad = prev


class Tensor:
    """Dense float64 array, optionally attached to the active graph.

    ``requires_grad`` marks a trainable leaf (a parameter).  Tensors produced
    by ops carry a ``node`` handle when any input was tracked.
    """

    __slots__ = ("data", "node", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.node: Node | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        if isinstance(key, slice) and self.ndim == 1:
            start, stop, step = key.indices(self.shape[-1])
            if step == 1:
                return slice_last(self, start, stop)
        raise TypeError("Tensor indexing supports only contiguous slices of 1-d tensors; use slice_last")

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _input_node(t: Tensor, graph: Graph) -> Node | None:
    node = t.node
    if node is not None and node.graph is graph:
        return node
    if t.requires_grad:
        t.node = Node("leaf", (), None, graph, tensor=t)
        return t.node
    return None


def _record(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.node = None
    out.requires_grad = False
    out.name = None
    if not _recording():
        return out
    graph = active_graph()
    nodes = tuple(_input_node(t, graph) for t in inputs)
    if any(n is not None for n in nodes):
        out.node = Node(kind, nodes, backward_fn, graph)
    return out


# ---------------------------------------------------------------- broadcasting


def _broadcast_check(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(a) >= len(b) and a[len(a) - len(b):] == b:
        return a
    if len(b) > len(a) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: cannot broadcast shapes {a} and {b} (only leading-axis expansion is allowed)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    """Elementwise quotient; callers guard the denominator away from zero."""
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check("div", a.shape, b.shape)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _record("div", out, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim not in (1, 2) or bd.ndim not in (1, 2) or ad.shape[-1] != bd.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")

    def bw(g):
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 1 and bd.ndim == 2:
            return bd @ g, np.outer(ad, g)
        if ad.ndim == 2 and bd.ndim == 1:
            return np.outer(g, bd), ad.T @ g
        return g * bd, g * ad

    return _record("matmul", ad @ bd, (a, b), bw)


def minimum(a, value: float) -> Tensor:
    """Elementwise ``min(a, value)`` against a constant ceiling."""
    a = _as_tensor(a)
    mask = a.data < value
    return _record("minimum", np.where(mask, a.data, value), (a,), lambda g: (g * mask,))


# ---------------------------------------------------------------- unary ops


def scale(a, s: float) -> Tensor:
    a = _as_tensor(a)
    s = float(s)
    return _record("scale", a.data * s, (a,), lambda g: (g * s,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record("relu", a.data * mask, (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus_np(x: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("softplus", softplus_np(x), (a,), lambda g: (g * expit(x),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    """Natural log with the argument floored at 1e-300."""
    a = _as_tensor(a)
    x = np.maximum(a.data, _LOG_FLOOR)
    return _record("log", np.log(x), (a,), lambda g: (g / x,))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("sin", np.sin(x), (a,), lambda g: (g * np.cos(x),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("cos", np.cos(x), (a,), lambda g: (-g * np.sin(x),))


def square(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    return _record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors the numpy name
    a = _as_tensor(a)
    x = a.data
    return _record("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


# ---------------------------------------------------------------- reductions


def sum(a, axis: int | None = None) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    shape = a.shape
    if axis is None:
        return _record("sum", np.asarray(a.data.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % a.ndim
    return _record("sum", a.data.sum(axis=ax), (a,),
                   lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),))


def mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l2sq(a) -> Tensor:
    """Sum of squares of all entries."""
    a = _as_tensor(a)
    x = a.data
    return _record("l2sq", np.asarray(np.dot(x.ravel(), x.ravel())), (a,), lambda g: (2.0 * g * x,))


def cumsum(a, exclusive: bool = False) -> Tensor:
    """Cumulative sum along the last axis; ``exclusive`` shifts it right by one."""
    a = _as_tensor(a)
    c = np.cumsum(a.data, axis=-1)
    if exclusive:
        c = np.concatenate([np.zeros(a.shape[:-1] + (1,)), c[..., :-1]], axis=-1)

    def bw(g):
        # reverse cumulative sum
        r = np.flip(np.cumsum(np.flip(g, -1), axis=-1), -1)
        if exclusive:
            r = np.concatenate([r[..., 1:], np.zeros(g.shape[:-1] + (1,))], axis=-1)
        return (r,)

    return _record("cumsum", c, (a,), bw)


# ---------------------------------------------------------------- structural ops


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along the last axis; leading extents must agree."""
    if axis not in (-1,) and axis != _as_tensor(tensors[0]).ndim - 1:
        raise ShapeError("concat: only the last axis is supported")
    ts = [_as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(f"concat: leading shapes differ, {ts[0].shape} vs {t.shape}")
    widths = [t.shape[-1] for t in ts]
    bounds = np.cumsum([0] + widths)
    out = np.concatenate([t.data for t in ts], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _record("concat", out, ts, bw)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[-1]
    if not (0 <= start <= stop <= n):
        raise ShapeError(f"slice: range [{start}, {stop}) outside last axis of shape {a.shape}")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", a.data[..., start:stop], (a,), bw)


def reshape(a, shape: tuple) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape)
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record("transpose", np.ascontiguousarray(a.data.T), (a,), lambda g: (g.T,))


def expand_last(a, n: int) -> Tensor:
    """Append a trailing axis of extent ``n`` by repetition: (...,) -> (..., n)."""
    a = _as_tensor(a)
    out = np.repeat(a.data[..., None], n, axis=-1)
    return _record("expand_last", out, (a,), lambda g: (g.sum(axis=-1),))


def take(a, index: np.ndarray) -> Tensor:
    """Gather rows along axis 0."""
    a = _as_tensor(a)
    idx = np.asarray(index, dtype=np.intp)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _record("take", a.data[idx], (a,), bw)


OP_KINDS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "concat": lambda *ts: concat(ts),
    "slice": slice_last,
    "sum": sum,
    "mean": mean,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "square": square,
    "abs": abs,
    "l2sq": l2sq,
    "l2-squared": l2sq,
    "cumsum": cumsum,
    "reshape": reshape,
    "transpose": transpose,
    "expand_last": expand_last,
    "take": take,
    "minimum": minimum,
}


def forward_op(kind: str, inputs: Sequence, *args, **kwargs) -> Tensor:
    """Apply the op named ``kind`` to ``inputs`` (extra arguments are op attributes)."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, *args, **kwargs)


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict:
    """Reverse-mode pass from a scalar ``loss``; resets the graph afterwards.

    Returns a mapping from each parameter reached by the loss to its gradient
    (a constant :class:`Tensor`).  When ``params`` is given, every listed
    parameter appears in the map, with zeros for those the loss never touched.
    """
    graph = active_graph()
    if loss.size != 1:
        reset_graph()
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    node = loss.node
    if node is None or node.graph is not graph:
        reset_graph()
        raise GraphError("backward: loss is detached from the active graph")

    grads: dict[int, np.ndarray] = {node.index: np.ones(loss.shape)}
    out: dict[Tensor, Tensor] = {}
    nodes = graph.nodes
    for i in range(node.index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        n = nodes[i]
        if n.kind == "leaf":
            out[n.tensor] = Tensor(g)
            continue
        for inp, ig in zip(n.inputs, n.backward_fn(g)):
            if inp is None or ig is None:
                continue
            j = inp.index
            if j in grads:
                grads[j] = grads[j] + ig
            else:
                grads[j] = ig
    reset_graph()
    if params is not None:
        for p in params:
            if p not in out:
                out[p] = Tensor(np.zeros(p.shape))
    return out


def finite_diff_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    ``f`` rebuilds the scalar from ``params`` on every call.  For each
    parameter tensor the error is ``||analytic - numeric|| / max(||analytic||, 1e-12)``;
    the maximum over parameters is returned.
    """
    if h <= 0:
        raise ValueError("finite_diff_check: step h must be positive")
    reset_graph()
    grads = backward(f(), params)
    worst = 0.0
    for p in params:
        analytic = grads[p].data
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                fp = float(f().data)
                flat[k] = orig - h
                fm = float(f().data)
                flat[k] = orig
                num_flat[k] = (fp - fm) / (2.0 * h)
        err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-12)
        worst = max(worst, float(err))
    return worst
