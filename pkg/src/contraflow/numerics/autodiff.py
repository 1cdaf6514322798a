"""Reverse-mode differentiation over numpy arrays.

Every differentiable op in this module is polymorphic: called with plain
ndarrays it returns a plain ndarray (no recording, fast inference path);
called with at least one ``Var`` it records a node on the dynamic trace.
Model code is therefore written once and used for both training and
evaluation.

Each recorded node keeps its forward function, so the whole trace can be
replayed from the leaf values (``replay``) and reproduce the original
forward values bit-for-bit.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

from .linalg import eigh_batch

_node_ids = itertools.count()


class NumericError(FloatingPointError):
    """Raised when a NaN/Inf shows up in a forward value or a gradient."""


class Var:
    """A node of the recorded trace."""

    __slots__ = ("value", "grad", "inputs", "vjps", "fwd", "op", "id")
    # makes numpy defer to our reflected operators (ndarray * Var -> Var.__rmul__)
    __array_ufunc__ = None

    def __init__(self, value, inputs=(), vjps=(), fwd=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.inputs = tuple(inputs)
        self.vjps = tuple(vjps)
        self.fwd = fwd
        self.op = op
        self.id = next(_node_ids)

    def __repr__(self):
        return f"Var(op={self.op}, id={self.id}, shape={self.value.shape})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def mT(self):
        return swap_last(self)

    def __len__(self):
        return len(self.value)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return vmean(self, axis=axis, keepdims=keepdims)


def value_of(x):
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def _apply(op: str, fwd: Callable, vjps: Sequence[Callable], *inputs):
    vals = [value_of(x) for x in inputs]
    out = fwd(*vals)
    if not any(isinstance(x, Var) for x in inputs):
        return out
    return Var(out, inputs, vjps, fwd, op)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    shape = tuple(shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(a, b):
    return _apply(
        "add",
        np.add,
        (lambda g, o, a, b: unbroadcast(g, np.shape(a)),
         lambda g, o, a, b: unbroadcast(g, np.shape(b))),
        a, b,
    )


def sub(a, b):
    return _apply(
        "sub",
        np.subtract,
        (lambda g, o, a, b: unbroadcast(g, np.shape(a)),
         lambda g, o, a, b: unbroadcast(-g, np.shape(b))),
        a, b,
    )


def mul(a, b):
    return _apply(
        "mul",
        np.multiply,
        (lambda g, o, a, b: unbroadcast(g * b, np.shape(a)),
         lambda g, o, a, b: unbroadcast(g * a, np.shape(b))),
        a, b,
    )


def div(a, b):
    return _apply(
        "div",
        np.divide,
        (lambda g, o, a, b: unbroadcast(g / b, np.shape(a)),
         lambda g, o, a, b: unbroadcast(-g * o / b, np.shape(b))),
        a, b,
    )


def neg(a):
    return _apply("neg", np.negative, (lambda g, o, a: -g,), a)


def power(a, p: float):
    """a ** p for a constant exponent p."""
    p = float(p)
    return _apply(
        "pow",
        lambda a: np.power(a, p),
        (lambda g, o, a: g * p * np.power(a, p - 1.0),),
        a,
    )


def square(a):
    return _apply("square", np.square, (lambda g, o, a: 2.0 * a * g,), a)


def exp(a):
    return _apply("exp", np.exp, (lambda g, o, a: g * o,), a)


def log(a):
    return _apply("log", np.log, (lambda g, o, a: g / a,), a)


def sqrt(a):
    return _apply("sqrt", np.sqrt, (lambda g, o, a: 0.5 * g / o,), a)


def tanh(a):
    return _apply("tanh", np.tanh, (lambda g, o, a: g * (1.0 - o * o),), a)


def _sigmoid(a):
    # numerically stable on both tails
    return np.exp(-np.logaddexp(0.0, -a))


def sigmoid(a):
    return _apply("sigmoid", _sigmoid, (lambda g, o, a: g * o * (1.0 - o),), a)


def softplus(a):
    return _apply(
        "softplus",
        lambda a: np.logaddexp(0.0, a),
        (lambda g, o, a: g * _sigmoid(a),),
        a,
    )


def relu(a):
    return _apply(
        "relu",
        lambda a: np.maximum(a, 0.0),
        (lambda g, o, a: g * (a > 0.0),),
        a,
    )


def vabs(a):
    return _apply("abs", np.abs, (lambda g, o, a: g * np.sign(a),), a)


def clip(a, lo, hi):
    """Clamp with a straight zero gradient outside [lo, hi]."""
    return _apply(
        "clip",
        lambda a: np.clip(a, lo, hi),
        (lambda g, o, a: g * ((a >= lo) & (a <= hi)),),
        a,
    )


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _apply(
        "where",
        lambda a, b: np.where(cond, a, b),
        (lambda g, o, a, b: unbroadcast(np.where(cond, g, 0.0), np.shape(a)),
         lambda g, o, a, b: unbroadcast(np.where(cond, 0.0, g), np.shape(b))),
        a, b,
    )


ACTIVATIONS = {"tanh": tanh, "softplus": softplus, "sigmoid": sigmoid, "relu": relu}


# --- shape ops -------------------------------------------------------------

def reshape(a, shape):
    shape = tuple(shape)
    return _apply(
        "reshape",
        lambda a: np.reshape(a, shape),
        (lambda g, o, a: np.reshape(g, np.shape(a)),),
        a,
    )


def swap_last(a):
    return _apply(
        "swap_last",
        lambda a: np.swapaxes(a, -1, -2),
        (lambda g, o, a: np.swapaxes(g, -1, -2),),
        a,
    )


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(p is None or p is Ellipsis or isinstance(p, (slice, int, np.integer)) for p in parts)


def getitem(a, idx):
    basic = _is_basic_index(idx)

    def vjp(g, o, a):
        z = np.zeros(np.shape(a))
        if basic:
            # basic indexing never repeats an element
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return z

    return _apply("getitem", lambda a: a[idx], (vjp,), a)


def concat(xs: Sequence, axis: int = -1):
    sizes = [np.shape(value_of(x))[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g, o, *vals):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]
        return vjp

    return _apply(
        "concat",
        lambda *vals: np.concatenate(vals, axis=axis),
        [make_vjp(i) for i in range(len(xs))],
        *xs,
    )


def stack(xs: Sequence, axis: int = 0):
    def make_vjp(i):
        return lambda g, o, *vals: np.take(g, i, axis=axis)

    return _apply(
        "stack",
        lambda *vals: np.stack(vals, axis=axis),
        [make_vjp(i) for i in range(len(xs))],
        *xs,
    )


# --- reductions ---------------------------------------------------------------

def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def vsum(a, axis=None, keepdims=False):
    return _apply(
        "sum",
        lambda a: np.sum(a, axis=axis, keepdims=keepdims),
        (lambda g, o, a: _expand_reduced(g, np.shape(a), axis, keepdims),),
        a,
    )


def vmean(a, axis=None, keepdims=False):
    shape = np.shape(value_of(a))
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def amax(a, axis=-1, keepdims=False):
    """Max reduction; ties share the gradient equally."""
    def vjp(g, o, a):
        ok = o if keepdims else np.expand_dims(o, axis)
        gk = g if keepdims else np.expand_dims(g, axis)
        mask = (a == ok).astype(float)
        mask /= mask.sum(axis=axis, keepdims=True)
        return mask * gk

    return _apply("amax", lambda a: np.max(a, axis=axis, keepdims=keepdims), (vjp,), a)


def cumsum(a, axis=-1):
    return _apply(
        "cumsum",
        lambda a: np.cumsum(a, axis=axis),
        (lambda g, o, a: np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis),),
        a,
    )


def take_along_axis(a, idx: np.ndarray, axis: int = -1):
    """Gather with integer index array ``idx`` (no gradient to idx)."""
    idx = np.asarray(idx)

    def vjp(g, o, a):
        z = np.zeros(np.shape(a))
        ax = axis % z.ndim
        full = list(np.indices(idx.shape, sparse=True))
        full[ax] = idx
        np.add.at(z, tuple(full), g)
        return z

    return _apply(
        "take_along_axis",
        lambda a: np.take_along_axis(a, idx, axis=axis),
        (vjp,),
        a,
    )


# --- linear algebra -----------------------------------------------------------

def matmul(a, b):
    return _apply(
        "matmul",
        np.matmul,
        (lambda g, o, a, b: _matmul_grad_a(g, a, b),
         lambda g, o, a, b: _matmul_grad_b(g, a, b)),
        a, b,
    )


def _promote(g, a, b):
    """Lift 1-D operands to matrices the way np.matmul does, including g."""
    a2 = a[None, :] if a.ndim == 1 else a
    b2 = b[:, None] if b.ndim == 1 else b
    g2 = g
    if b.ndim == 1:
        g2 = np.expand_dims(g2, -1)
    if a.ndim == 1:
        g2 = np.expand_dims(g2, -2)
    return g2, a2, b2


def _matmul_grad_a(g, a, b):
    a, b = np.asarray(a), np.asarray(b)
    g2, a2, b2 = _promote(np.asarray(g), a, b)
    ga = g2 @ np.swapaxes(b2, -1, -2)
    if a.ndim == 1:
        ga = ga[..., 0, :]
    return unbroadcast(ga, a.shape)


def _matmul_grad_b(g, a, b):
    a, b = np.asarray(a), np.asarray(b)
    g2, a2, b2 = _promote(np.asarray(g), a, b)
    gb = np.swapaxes(a2, -1, -2) @ g2
    if b.ndim == 1:
        gb = gb[..., :, 0]
    return unbroadcast(gb, b.shape)


DEGENERATE_GAP = 1e-8


def _cluster_average(V: np.ndarray, w: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Replace per-eigenvalue cotangents by their cluster mean.

    For (near-)repeated eigenvalues the individual derivatives are not
    defined; the mean over a cluster is the derivative of the cluster's
    average eigenvalue, which is well defined.
    """
    g = g.copy()
    D = w.shape[-1]
    if D < 2:
        return g
    close = np.diff(w, axis=-1) < DEGENERATE_GAP
    if not close.any():
        return g
    for b in zip(*np.nonzero(close.any(axis=-1))):
        start = 0
        row_close = close[b]
        for j in range(1, D + 1):
            if j == D or not row_close[j - 1]:
                if j - start > 1:
                    g[b + (slice(start, j),)] = g[b + (slice(start, j),)].mean()
                start = j
    return g


def eigvalsh(S):
    """Ascending eigenvalues of a (batch of) symmetric matrices.

    Backward uses dλ_i = v_iᵀ dS v_i; repeated eigenvalues receive the
    subgradient of their cluster mean.
    """
    cache = {}

    def fwd(S):
        w, V = eigh_batch(S)
        cache["V"] = V
        return w

    def vjp(g, o, S):
        V = cache["V"]
        g = _cluster_average(V, o, g)
        return (V * g[..., None, :]) @ np.swapaxes(V, -1, -2)

    return _apply("eigvalsh", fwd, (vjp,), S)


# --- trace utilities ----------------------------------------------------------

def _topo(root: Var) -> list[Var]:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack_.append((node, True))
        for x in node.inputs:
            if isinstance(x, Var) and x.id not in seen:
                stack_.append((x, False))
    return order


def backward(root: Var) -> None:
    """Accumulate d root / d node into ``.grad`` of every leaf under root."""
    if root.value.size != 1:
        raise ValueError("backward needs a scalar root")
    if not np.isfinite(root.value).all():
        raise NumericError(f"non-finite loss at node {root.id} ({root.op})")
    order = _topo(root)
    grads = {root.id: np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if not node.inputs:
            node.grad = g if node.grad is None else node.grad + g
            continue
        vals = [value_of(x) for x in node.inputs]
        for x, vjp in zip(node.inputs, node.vjps):
            if not isinstance(x, Var):
                continue
            c = np.asarray(vjp(g, node.value, *vals), dtype=float)
            if not np.isfinite(c).all():
                raise NumericError(
                    f"non-finite gradient flowing from node {node.id} ({node.op}) into node {x.id} ({x.op})"
                )
            if x.id in grads:
                grads[x.id] = grads[x.id] + c
            else:
                grads[x.id] = c


def replay(root: Var) -> np.ndarray:
    """Recompute every node of the trace from the leaves; returns root value."""
    cache = {}
    for node in _topo(root):
        if not node.inputs:
            cache[node.id] = node.value
            continue
        vals = [cache[x.id] if isinstance(x, Var) else x for x in node.inputs]
        cache[node.id] = np.asarray(node.fwd(*vals), dtype=float)
    return cache[root.id]


# --- parameter storage ---------------------------------------------------------

class ParamStore:
    """Flat float64 parameter vector with named, shaped slices."""

    def __init__(self):
        self.values = np.zeros(0)
        self._slices: dict[str, tuple[int, int, tuple]] = {}

    def add(self, name: str, init) -> None:
        if name in self._slices:
            raise KeyError(f"duplicate parameter {name}")
        init = np.asarray(init, dtype=float)
        start = self.values.size
        self.values = np.concatenate([self.values, init.ravel()])
        self._slices[name] = (start, start + init.size, init.shape)

    def __contains__(self, name):
        return name in self._slices

    @property
    def size(self) -> int:
        return self.values.size

    def names(self) -> list[str]:
        return list(self._slices)

    def slice_of(self, name: str) -> slice:
        a, b, _ = self._slices[name]
        return slice(a, b)

    def get(self, name: str) -> np.ndarray:
        a, b, shape = self._slices[name]
        return self.values[a:b].reshape(shape)

    def set(self, name: str, value) -> None:
        a, b, shape = self._slices[name]
        self.values[a:b] = np.broadcast_to(np.asarray(value, dtype=float), shape).ravel()

    def arrays(self) -> dict[str, np.ndarray]:
        """Read-only views keyed by name (fast, untraced evaluation)."""
        return {n: self.get(n) for n in self._slices}

    def shapes(self) -> dict[str, tuple]:
        return {n: s for n, (_, _, s) in self._slices.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.values = self.values.copy()
        out._slices = dict(self._slices)
        return out


class ParamGraph:
    """One recorded forward pass over a ParamStore.

    ``params`` maps names to leaf ``Var`` objects holding copies of the
    current parameter values.  Build the loss from them, then call
    ``grad(graph, loss)``.
    """

    def __init__(self, store: ParamStore, names: Iterable[str] | None = None):
        self.store = store
        names = store.names() if names is None else list(names)
        self.params = {n: Var(store.get(n).copy()) for n in names}


def grad(graph: ParamGraph, loss) -> np.ndarray:
    """Gradient of a scalar loss with respect to the whole parameter vector."""
    out = np.zeros(graph.store.size)
    if not isinstance(loss, Var):
        # constant in all parameters
        if not np.isfinite(loss).all():
            raise NumericError("non-finite loss")
        return out
    for leaf in graph.params.values():
        leaf.grad = None
    backward(loss)
    for name, leaf in graph.params.items():
        if leaf.grad is not None:
            out[graph.store.slice_of(name)] = np.asarray(leaf.grad).ravel()
    return out
