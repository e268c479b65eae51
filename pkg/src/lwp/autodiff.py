"""Dense-matrix reverse-mode automatic differentiation on a per-step tape.

Every value is a 2-D float64 matrix. Operations build a small acyclic graph
of `Node` objects; `backward` walks it once in reverse topological order and
accumulates gradients into every reachable leaf. Graphs are rebuilt for each
training step and garbage-collected afterwards.

Any operation whose result contains NaN or Inf raises `NonFiniteError`
instead of propagating the value.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar root, reuse, cycle)."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Coerce `x` to a finite 2-D float64 array or raise."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got ndim={a.ndim}")
    if not np.isfinite(a).all():
        raise NonFiniteError(f"{name}: contains NaN or Inf")
    return a


def new_rng(seed: int, *key: int) -> np.random.Generator:
    """Deterministic PCG64 generator for `seed` and an optional stream key.

    The generator is numpy's PCG64 seeded through SeedSequence, which is
    documented to produce identical draw sequences for identical seeds on
    every platform. `key` selects independent sub-streams (model init,
    shuffling, data generation) from one experiment seed.
    """
    entropy = int(seed) & 0xFFFFFFFFFFFFFFFF
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


class Node:
    """One vertex of the tape: value, gradient, parent links and a rule id.

    `value` and `grad` always share the same 2-D shape. Leaf nodes (rule
    "leaf") carry parameters or constants; interior nodes record the local
    derivative rule used by `backward`.
    """

    __slots__ = ("value", "grad", "parents", "op", "_rule", "_done")

    def __init__(self, value, parents=(), op="leaf", rule=None):
        self.value = as_matrix(value, op)
        self.grad = np.zeros_like(self.value)
        self.parents = tuple(parents)
        self.op = op
        self._rule = rule
        self._done = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(x) -> Node:
    """Wrap a matrix as a leaf node (gradient is computed but unused)."""
    return Node(x, op="const")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum `g` back down to `shape` along axes that were broadcast."""
    if g.shape == shape:
        return g
    out = g
    if shape[0] == 1 and out.shape[0] > 1:
        out = out.sum(axis=0, keepdims=True)
    if shape[1] == 1 and out.shape[1] > 1:
        out = out.sum(axis=1, keepdims=True)
    return out


def _check_broadcast(a: Node, b: Node, op: str):
    sa, sb = a.shape, b.shape
    for da, db in zip(sa, sb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"{op}: shapes {sa} and {sb} do not broadcast")


def add(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "add")

    def rule(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad += _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), "add", rule)


def sub(a: Node, b: Node) -> Node:
    _check_broadcast(a, b, "sub")

    def rule(g):
        a.grad += _unbroadcast(g, a.shape)
        b.grad -= _unbroadcast(g, b.shape)

    return Node(a.value - b.value, (a, b), "sub", rule)


def mul(a: Node, b: Node) -> Node:
    """Elementwise product; broadcasting over length-1 axes is allowed."""
    _check_broadcast(a, b, "mul")

    def rule(g):
        a.grad += _unbroadcast(g * b.value, a.shape)
        b.grad += _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), "mul", rule)


def scale(a: Node, c: float) -> Node:
    """Multiply by a plain scalar constant."""
    c = float(c)

    def rule(g):
        a.grad += c * g

    return Node(a.value * c, (a,), "scale", rule)


def matmul(a: Node, b: Node) -> Node:
    """Matrix product; gradients are g·bᵀ and aᵀ·g."""
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} x {b.shape}")

    def rule(g):
        a.grad += g @ b.value.T
        b.grad += a.value.T @ g

    return Node(a.value @ b.value, (a, b), "matmul", rule)


def transpose(a: Node) -> Node:
    def rule(g):
        a.grad += g.T

    return Node(a.value.T.copy(), (a,), "transpose", rule)


def exp(a: Node) -> Node:
    out = Node(np.exp(a.value), (a,), "exp")

    def rule(g):
        a.grad += g * out.value

    out._rule = rule
    return out


def sqrt(a: Node) -> Node:
    """Elementwise square root; requires non-negative entries.

    The derivative blows up at exactly zero; callers that may hit zero
    should offset the argument first.
    """
    if (a.value < 0).any():
        raise NonFiniteError("sqrt: negative entry")
    out = Node(np.sqrt(a.value), (a,), "sqrt")

    def rule(g):
        a.grad += g / (2.0 * out.value)

    out._rule = rule
    return out


def power(a: Node, p: float) -> Node:
    p = float(p)
    out = Node(np.power(a.value, p), (a,), "power")

    def rule(g):
        a.grad += g * p * np.power(a.value, p - 1.0)

    out._rule = rule
    return out


def tanh(a: Node) -> Node:
    out = Node(np.tanh(a.value), (a,), "tanh")

    def rule(g):
        a.grad += g * (1.0 - out.value * out.value)

    out._rule = rule
    return out


def relu(a: Node) -> Node:
    def rule(g):
        a.grad += g * (a.value > 0)

    return Node(np.maximum(a.value, 0.0), (a,), "relu", rule)


def clamp_min(a: Node, floor: float) -> Node:
    """max(a, floor); gradient is zero where the floor is active."""
    floor = float(floor)

    def rule(g):
        a.grad += g * (a.value > floor)

    return Node(np.maximum(a.value, floor), (a,), "clamp_min", rule)


def sum_all(a: Node) -> Node:
    def rule(g):
        a.grad += g[0, 0]

    return Node([[a.value.sum()]], (a,), "sum_all", rule)


def sum_rows(a: Node) -> Node:
    """Row sums: N x D -> N x 1."""

    def rule(g):
        a.grad += g  # broadcasts N x 1 over columns

    return Node(a.value.sum(axis=1, keepdims=True), (a,), "sum_rows", rule)


def frobenius_sq(a: Node) -> Node:
    """Sum of squared entries as a 1 x 1 node."""

    def rule(g):
        a.grad += (2.0 * g[0, 0]) * a.value

    return Node([[float(np.sum(a.value * a.value))]], (a,), "frobenius_sq", rule)


def sq_dist_matrix(z: np.ndarray) -> np.ndarray:
    """All-pairs squared Euclidean distances of the rows of `z`.

    Uses the expansion ||zi||^2 + ||zj||^2 - 2<zi,zj>, clamped at zero to
    remove negative round-off, with an exactly zero diagonal.
    """
    sq = np.sum(z * z, axis=1, keepdims=True)
    d = sq + sq.T - 2.0 * (z @ z.T)
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def pairwise_sq_dist(z: Node) -> Node:
    """Differentiable N x N matrix of squared row distances.

    Output is symmetric with a zero diagonal. For upstream gradient G the
    input gradient is 2·(diag(S·1) − S)·Z with S = G + Gᵀ.
    """
    if z.shape[0] < 1:
        raise ShapeError("pairwise_sq_dist: empty batch")

    def rule(g):
        s = g + g.T
        z.grad += 2.0 * (s.sum(axis=1, keepdims=True) * z.value - s @ z.value)

    return Node(sq_dist_matrix(z.value), (z,), "pairwise_sq_dist", rule)


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Numerically stable row-wise softmax of a plain matrix."""
    return np.exp(_log_softmax(logits))


def softmax_cross_entropy(logits: Node, targets) -> Node:
    """Mean cross-entropy between target rows and row-wise softmax of logits.

    `targets` is a constant N x C matrix whose rows are probability vectors
    (one-hot or soft). The gradient with respect to the logits is
    (softmax(logits) - targets) / N.
    """
    t = as_matrix(targets, "targets")
    if t.shape != logits.shape:
        raise ShapeError(
            f"softmax_cross_entropy: targets {t.shape} vs logits {logits.shape}"
        )
    if logits.shape[1] < 2:
        raise ShapeError("softmax_cross_entropy: need at least 2 classes")
    row_sums = t.sum(axis=1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ValueError("softmax_cross_entropy: target rows must sum to 1")
    n = logits.shape[0]
    logp = _log_softmax(logits.value)
    loss = float(-(t * logp).sum() / n)
    p = np.exp(logp)

    def rule(g):
        logits.grad += (g[0, 0] / n) * (p - t)

    return Node([[loss]], (logits,), "softmax_cross_entropy", rule)


def _toposort(root: Node):
    order = []
    state = {id(root): 0}
    stack = [(root, iter(root.parents))]
    while stack:
        node, it = stack[-1]
        pushed = False
        for p in it:
            s = state.get(id(p))
            if s == 0:
                raise GraphError("cycle detected in computation graph")
            if s is None:
                state[id(p)] = 0
                stack.append((p, iter(p.parents)))
                pushed = True
                break
        if not pushed:
            stack.pop()
            state[id(node)] = 1
            order.append(node)
    return order


def backward(loss: Node) -> None:
    """Populate `grad` on every node reachable from the scalar `loss`.

    Gradients accumulate into leaves, so parameter grads must be zeroed
    between steps. Calling backward twice on the same root is an error;
    rebuild the graph instead.
    """
    if loss.shape != (1, 1):
        raise GraphError(f"backward: root must be 1x1, got {loss.shape}")
    if loss._done:
        raise GraphError("backward: already called on this root; rebuild the graph")
    order = _toposort(loss)
    loss.grad = np.ones((1, 1))
    for node in reversed(order):
        if node._rule is not None:
            node._rule(node.grad)
    loss._done = True
