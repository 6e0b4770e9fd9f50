"""Dense 2-D float64 arithmetic with reverse-mode differentiation.

Every value is a 2-D ``numpy.ndarray`` of dtype float64 wrapped in a
:class:`Node`.  Operations build a graph as they run; :func:`backward`
walks it once in reverse topological order and accumulates gradients into
every node that requires them.

Activations follow a column convention: a matrix of token features has shape
``(features, tokens)`` so a linear map is ``W @ x``.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import DimensionError, NumericalError

DTYPE = np.float64


def as_matrix(values) -> np.ndarray:
    """Coerce ``values`` to a fresh 2-D float64 array (vectors become columns)."""
    arr = np.array(values, dtype=DTYPE)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimensionError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def make_rng(seed) -> np.random.Generator:
    """Counter-based generator; ``seed`` may be an int or a SeedSequence."""
    return np.random.Generator(np.random.Philox(seed))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Derive ``n`` independent child generators from ``rng``."""
    return list(rng.spawn(n))


class Node:
    """A matrix value in the computation graph.

    ``grad`` reads as a zero matrix of the value's shape until something is
    accumulated into it.
    """

    __slots__ = ("value", "_grad", "parents", "_backward", "requires_grad", "name")

    def __init__(self, value, requires_grad=False, name=None, parents=(), backward_fn=None):
        self.value = value if isinstance(value, np.ndarray) and value.dtype == DTYPE and value.ndim == 2 else as_matrix(value)
        self._grad = None
        self.parents = tuple(parents)
        self._backward = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def rows(self):
        return self.value.shape[0]

    @property
    def cols(self):
        return self.value.shape[1]

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def accumulate(self, g: np.ndarray):
        self._grad = g if self._grad is None else self._grad + g

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, requires_grad={self.requires_grad})"


def parameter(values, name=None) -> Node:
    return Node(as_matrix(values), requires_grad=True, name=name)


def constant(values, name=None) -> Node:
    return Node(as_matrix(values), requires_grad=False, name=name)


def _check_finite(value: np.ndarray, op: str):
    if not np.isfinite(value).all():
        raise NumericalError(f"{op} produced non-finite values")


def _result(value, op, parents, backward_fn):
    _check_finite(value, op)
    if any(p.requires_grad for p in parents):
        return Node(value, requires_grad=True, parents=parents, backward_fn=backward_fn)
    return Node(value)


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def backward_fn(g):
        return (
            g @ bv.T if a.requires_grad else None,
            av.T @ g if b.requires_grad else None,
        )

    return _result(av @ bv, "matmul", (a, b), backward_fn)


def add(a: Node, b: Node) -> Node:
    """Elementwise sum; ``b`` may also be a column (rows x 1) or row (1 x cols) vector."""
    if a.shape == b.shape:
        reduce = None
    elif b.shape == (a.rows, 1):
        reduce = 1
    elif b.shape == (1, a.cols):
        reduce = 0
    else:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}")

    def backward_fn(g):
        gb = None
        if b.requires_grad:
            gb = g if reduce is None else g.sum(axis=reduce, keepdims=True)
        return (g if a.requires_grad else None, gb)

    return _result(a.value + b.value, "add", (a, b), backward_fn)


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _result(a.value * c, "scale", (a,), lambda g: (g * c,))


scale_by_constant = scale


def mul(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise DimensionError(f"elementwise_mul shape mismatch: {a.shape} * {b.shape}")
    av, bv = a.value, b.value

    def backward_fn(g):
        return (g * bv if a.requires_grad else None, g * av if b.requires_grad else None)

    return _result(av * bv, "elementwise_mul", (a, b), backward_fn)


elementwise_mul = mul


def transpose(a: Node) -> Node:
    return _result(a.value.T.copy(), "transpose", (a,), lambda g: (g.T,))


def _relu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def relu(a: Node) -> Node:
    x = a.value
    return _result(np.maximum(x, 0.0), "relu", (a,), lambda g: (_relu_backward(x, g),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Node) -> Node:
    """Tanh-approximated GELU; smooth everywhere, which keeps finite differences honest."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)

    def backward_fn(g):
        d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * d,)

    return _result(0.5 * x * (1.0 + t), "gelu", (a,), backward_fn)


def softmax(a: Node, axis=None, mask=None) -> Node:
    """Numerically stable softmax.

    With ``axis=None`` the input must be a vector and is normalized as a
    whole.  ``mask`` is a boolean array of the input's shape; entries where it
    is False get probability exactly zero.
    """
    x = a.value
    if axis is None:
        if 1 not in x.shape:
            raise DimensionError(f"softmax without an axis needs a vector, got {x.shape}")
        axis = 0 if x.shape[1] == 1 else 1
    if mask is None:
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise DimensionError(f"softmax mask shape {mask.shape} != input {x.shape}")
        big = np.where(mask, x, -np.inf).max(axis=axis, keepdims=True)
        big = np.where(np.isfinite(big), big, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x - big, 0.0)), 0.0)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, "softmax", (a,), backward_fn)


def layer_norm(a: Node, gain: Node, bias: Node, eps: float = 1e-5) -> Node:
    """Normalize each column over its rows, then apply per-row gain and bias."""
    x = a.value
    d = x.shape[0]
    if gain.shape != (d, 1) or bias.shape != (d, 1):
        raise DimensionError(f"layer_norm gain/bias must be ({d}, 1), got {gain.shape}, {bias.shape}")
    xc = x - x.mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=0, keepdims=True) + eps)
    xhat = xc * inv
    gv = gain.value

    def backward_fn(g):
        gx = None
        if a.requires_grad:
            dxhat = g * gv
            gx = (inv / d) * (
                d * dxhat
                - dxhat.sum(axis=0, keepdims=True)
                - xhat * (dxhat * xhat).sum(axis=0, keepdims=True)
            )
        return (
            gx,
            (g * xhat).sum(axis=1, keepdims=True) if gain.requires_grad else None,
            g.sum(axis=1, keepdims=True) if bias.requires_grad else None,
        )

    return _result(xhat * gv + bias.value, "layer_norm", (a, gain, bias), backward_fn)


def embedding_lookup(table: Node, ids) -> Node:
    """Gather columns of a ``(dim, vocab)`` table."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError("embedding ids must be a flat sequence")
    if ids.size and (ids.min() < 0 or ids.max() >= table.cols):
        raise IndexError(f"embedding id out of range [0, {table.cols})")
    n_vocab = table.cols

    def backward_fn(g):
        acc = np.zeros((n_vocab, g.shape[0]), dtype=DTYPE)
        np.add.at(acc, ids, g.T)
        return (acc.T,)

    return _result(table.value[:, ids], "embedding_lookup", (table,), backward_fn)


def concat_rows(nodes) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise DimensionError("concat_rows needs at least one input")
    cols = nodes[0].cols
    if any(n.cols != cols for n in nodes):
        raise DimensionError(f"concat_rows column mismatch: {[n.shape for n in nodes]}")
    bounds = np.cumsum([0] + [n.rows for n in nodes])

    def backward_fn(g):
        return tuple(
            g[bounds[i]:bounds[i + 1]] if n.requires_grad else None for i, n in enumerate(nodes)
        )

    return _result(np.concatenate([n.value for n in nodes], axis=0), "concat_rows", nodes, backward_fn)


def take_rows(a: Node, start: int, stop: int) -> Node:
    rows = a.rows

    def backward_fn(g):
        out = np.zeros((rows, g.shape[1]), dtype=DTYPE)
        out[start:stop] = g
        return (out,)

    return _result(a.value[start:stop].copy(), "take_rows", (a,), backward_fn)


def take_columns(a: Node, idx) -> Node:
    idx = np.asarray(idx, dtype=np.int64)
    cols = a.cols

    def backward_fn(g):
        out = np.zeros((g.shape[0], cols), dtype=DTYPE)
        np.add.at(out, (slice(None), idx), g)
        return (out,)

    return _result(a.value[:, idx], "take_columns", (a,), backward_fn)


def place_columns(a: Node, idx, n_cols: int) -> Node:
    """Scatter the columns of ``a`` to positions ``idx`` of a zero matrix."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size != a.cols:
        raise DimensionError(f"place_columns: {idx.size} indices for {a.cols} columns")
    out = np.zeros((a.rows, n_cols), dtype=DTYPE)
    out[:, idx] = a.value
    return _result(out, "place_columns", (a,), lambda g: (g[:, idx],))


def cross_entropy(logits: Node, target_ids) -> Node:
    """Mean negative log-likelihood; one logit row per target position."""
    targets = np.asarray(target_ids, dtype=np.int64).reshape(-1)
    n, v = logits.shape
    if targets.size != n:
        raise DimensionError(f"cross_entropy: {n} logit rows for {targets.size} targets")
    if n == 0:
        raise DimensionError("cross_entropy needs at least one position")
    if targets.min() < 0 or targets.max() >= v:
        raise IndexError(f"target id out of range [0, {v})")
    x = logits.value
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=1, keepdims=True)
    log_z = np.log(z) + m
    rows = np.arange(n)
    loss = float(np.mean(log_z[:, 0] - x[rows, targets]))

    def backward_fn(g):
        p = e / z
        p[rows, targets] -= 1.0
        return (p * (g[0, 0] / n),)

    return _result(np.array([[loss]]), "cross_entropy", (logits,), backward_fn)


def dropout_mask(rate: float, rng: np.random.Generator, shape) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability ``rate``, else 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(a: Node, rate: float, rng, train_mode: bool) -> Node:
    if not train_mode or rate == 0.0:
        return a
    if rng is None:
        raise ValueError("train-mode dropout needs an explicit rng")
    return mul(a, constant(dropout_mask(rate, rng, a.shape)))


def topological_order(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, seed=None):
    """Accumulate d(root)/d(node) into every reachable node that requires grad."""
    if not root.requires_grad:
        return
    if seed is None:
        if root.shape != (1, 1):
            raise DimensionError(f"backward without a seed needs a scalar root, got {root.shape}")
        seed = np.ones((1, 1), dtype=DTYPE)
    root.accumulate(as_matrix(seed))
    for node in reversed(topological_order(root)):
        if node._backward is None or node._grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node._grad)):
            if g is not None and parent.requires_grad:
                parent.accumulate(g)
