"""Small reverse-mode autodiff over dense float64 arrays.

A :class:`Graph` is a tape. Every op appends a node holding its cached
output and a closure that maps the output cotangent to input cotangents.
Nodes are numbered in creation order, so the tape is topologically sorted
by construction and :func:`backward` is a single reverse sweep.

    g = Graph()
    x = g.param(np.array([3.0]), name="x")
    loss = (x * x).sum()
    grads = backward(g, loss)          # {x.id: array([6.])}
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

OP_KINDS = (
    "add", "sub", "mul", "matmul", "exp", "log", "tanh", "sigmoid",
    "relu-squared", "sum", "mean", "square", "concat", "slice",
    "softmax-normalize",
    # extras used by the models
    "log-softmax", "softplus", "reshape", "transpose", "neg",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple, kind: str) -> tuple:
    if a == b:
        return a
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a} and {b} do not conform") from None


class Tensor:
    """A node of a :class:`Graph`: cached value plus its position on the tape."""

    __slots__ = ("graph", "id", "value")
    __array_priority__ = 100.0

    def __init__(self, graph: "Graph", node_id: int, value: np.ndarray):
        self.graph = graph
        self.id = node_id
        self.value = value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Flat row-major view of the values."""
        return self.value.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(id={self.id}, shape={self.shape})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


@dataclass
class Node:
    kind: str
    inputs: tuple
    value: np.ndarray
    vjp: Callable | None = None


@dataclass
class Graph:
    """Append-only tape.

    With ``record=False`` ops still compute values but keep no closures,
    which is the inference path (planning-time sampling and BRNE solves).
    """

    record: bool = True
    check_finite: bool = True
    nodes: list = field(default_factory=list)
    param_ids: dict = field(default_factory=dict)

    def _leaf(self, value, kind: str) -> Tensor:
        value = _as_array(value)
        node_id = len(self.nodes)
        self.nodes.append(Node(kind, (), value if self.record else None))
        return Tensor(self, node_id, value)

    def param(self, value, name: str | None = None) -> Tensor:
        t = self._leaf(value, "param")
        self.param_ids[t.id] = name if name is not None else f"p{t.id}"
        return t

    def const(self, value) -> Tensor:
        return self._leaf(value, "const")

    def params(self, arrays: dict) -> dict:
        """Register a name -> array dict as trainable leaves."""
        return {k: self.param(v, name=k) for k, v in arrays.items()}

    def record_op(self, kind: str, inputs: Sequence[Tensor], value: np.ndarray,
                  vjp: Callable | None) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(f"{kind} produced non-finite values")
        node_id = len(self.nodes)
        if self.record:
            self.nodes.append(Node(kind, tuple(t.id for t in inputs), value, vjp))
        else:
            self.nodes.append(None)
        return Tensor(self, node_id, value)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Tensor):
            return x.graph
    raise TypeError("at least one operand must be a Tensor")


def _lift(g: Graph, x) -> Tensor:
    if isinstance(x, Tensor):
        if x.graph is not g:
            raise ValueError("operands belong to different graphs")
        return x
    return g.const(x)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return g.record_op("add", (a, b), a.value + b.value,
                       lambda go: (_unbroadcast(go, sa), _unbroadcast(go, sb)))


def sub(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return g.record_op("sub", (a, b), a.value - b.value,
                       lambda go: (_unbroadcast(go, sa), _unbroadcast(-go, sb)))


def mul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    _broadcast_shape(a.shape, b.shape, "mul")
    av, bv = a.value, b.value
    return g.record_op("mul", (a, b), av * bv,
                       lambda go: (_unbroadcast(go * bv, av.shape),
                                   _unbroadcast(go * av, bv.shape)))


def neg(a: Tensor) -> Tensor:
    return a.graph.record_op("neg", (a,), -a.value, lambda go: (-go,))


def square(a: Tensor) -> Tensor:
    av = a.value
    return a.graph.record_op("square", (a,), av * av, lambda go: (2.0 * av * go,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return a.graph.record_op("exp", (a,), out, lambda go: (go * out,))


def log(a: Tensor) -> Tensor:
    av = a.value
    if np.any(av <= 0.0):
        raise ValueError("log of non-positive input")
    return a.graph.record_op("log", (a,), np.log(av), lambda go: (go / av,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return a.graph.record_op("tanh", (a,), out, lambda go: (go * (1.0 - out * out),))


def _sigmoid(x):
    # tanh form: one transcendental and no overflow for large |x|
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.value)
    return a.graph.record_op("sigmoid", (a,), out, lambda go: (go * out * (1.0 - out),))


def relu_squared(a: Tensor) -> Tensor:
    r = np.maximum(a.value, 0.0)
    return a.graph.record_op("relu-squared", (a,), r * r, lambda go: (2.0 * r * go,))


def softplus(a: Tensor) -> Tensor:
    av = a.value
    out = np.logaddexp(0.0, av)
    sig = _sigmoid(av)
    return a.graph.record_op("softplus", (a,), out, lambda go: (go * sig,))


# ------------------------------------------------------------------ linear alg

def matmul(a, b) -> Tensor:
    g = _graph_of(a, b)
    a, b = _lift(g, a), _lift(g, b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shapes {av.shape} and {bv.shape} do not conform")

    def vjp(go):
        ga = go @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ go
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return g.record_op("matmul", (a, b), av @ bv, vjp)


def transpose(a: Tensor) -> Tensor:
    """Swap the last two axes."""
    return a.graph.record_op("transpose", (a,), np.swapaxes(a.value, -1, -2),
                             lambda go: (np.swapaxes(go, -1, -2),))


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, len(shape))
    out = np.sum(a.value, axis=axes)

    def vjp(go):
        if axes is not None:
            go = np.expand_dims(go, axes)
        return (np.broadcast_to(go, shape).copy(),)

    return a.graph.record_op("sum", (a,), np.asarray(out), vjp)


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, len(shape))
    count = a.value.size if axes is None else int(np.prod([shape[i] for i in axes]))
    out = np.mean(a.value, axis=axes)

    def vjp(go):
        if axes is not None:
            go = np.expand_dims(go, axes)
        return (np.broadcast_to(go / count, shape).copy(),)

    return a.graph.record_op("mean", (a,), np.asarray(out), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Normalize ``exp(a)`` to sum 1 along ``axis`` (max-subtracted)."""
    av = a.value
    e = np.exp(av - av.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(go):
        return (out * (go - (go * out).sum(axis=axis, keepdims=True)),)

    return a.graph.record_op("softmax-normalize", (a,), out, vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    av = a.value
    shifted = av - av.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    sm = np.exp(out)

    def vjp(go):
        return (go - sm * go.sum(axis=axis, keepdims=True),)

    return a.graph.record_op("log-softmax", (a,), out, vjp)


# --------------------------------------------------------------- restructuring

def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    g = _graph_of(*xs)
    xs = [_lift(g, x) for x in xs]
    ref = xs[0].shape
    ax = axis % len(ref)
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
                x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} do not conform")
    sizes = [x.shape[ax] for x in xs]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in xs], axis=ax)
    return g.record_op("concat", xs, out,
                       lambda go: tuple(np.split(go, bounds, axis=ax)))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis or i is None
               for i in items)


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    try:
        out = a.value[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None

    basic = _is_basic_index(index)

    def vjp(go):
        grad = np.zeros(shape)
        if basic:
            grad[index] = go
        else:
            np.add.at(grad, index, go)
        return (grad,)

    return a.graph.record_op("slice", (a,), np.array(out, dtype=np.float64), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return a.graph.record_op("reshape", (a,), out, lambda go: (go.reshape(old),))


def forward_op(kind: str, inputs: Sequence[Tensor], **kwargs) -> Tensor:
    """Dispatch an op by its kind name."""
    table = {
        "add": add, "sub": sub, "mul": mul, "matmul": matmul, "exp": exp,
        "log": log, "tanh": tanh, "sigmoid": sigmoid, "relu-squared": relu_squared,
        "sum": sum_, "mean": mean, "square": square, "concat": None,
        "slice": slice_, "softmax-normalize": softmax, "log-softmax": log_softmax,
        "softplus": softplus, "reshape": reshape, "transpose": transpose, "neg": neg,
    }
    if kind not in table:
        raise ValueError(f"unknown op kind {kind!r}")
    if kind == "concat":
        return concat(inputs, **kwargs)
    return table[kind](*inputs, **kwargs)


# -------------------------------------------------------------------- backward

def backward(graph: Graph, loss: Tensor, keep_all: bool = False) -> dict:
    """Return d(loss)/d(node) for every parameter node (all nodes if ``keep_all``)."""
    if not graph.record:
        raise RuntimeError("graph was built with record=False")
    if loss.value.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads: list = [None] * (loss.id + 1)
    grads[loss.id] = np.ones_like(loss.value)
    nodes = graph.nodes
    for nid in range(loss.id, -1, -1):
        go = grads[nid]
        if go is None:
            continue
        node = nodes[nid]
        if node.vjp is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(go)):
            if gi is None:
                continue
            prev = grads[inp]
            grads[inp] = gi if prev is None else prev + gi
        if not keep_all:
            grads[nid] = None
    if keep_all:
        return {i: gr for i, gr in enumerate(grads) if gr is not None}
    return {pid: (grads[pid] if pid < len(grads) and grads[pid] is not None
                  else np.zeros_like(nodes[pid].value))
            for pid in graph.param_ids}


def grads_by_name(graph: Graph, grads: dict) -> dict:
    return {graph.param_ids[pid]: gr for pid, gr in grads.items() if pid in graph.param_ids}


# ------------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns ``(new_params, new_state)``."""
    t = state.t + 1
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ShapeError(f"adam_step: shape mismatch for {k!r}")
        m = beta1 * state.m[k] + (1.0 - beta1) * g
        v = beta2 * state.v[k] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[k], new_v[k] = m, v
    return new_p, AdamState(new_m, new_v, t)
