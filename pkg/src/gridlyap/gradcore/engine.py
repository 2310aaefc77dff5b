"""Reverse-mode gradient engine over an explicit expression graph.

A ``Tape`` owns nodes in creation order, which is a topological order by
construction: an op can only reference nodes that already exist.  Values
are float64 numpy arrays of any shape; elementwise ops broadcast and the
backward pass sums adjoints over broadcast axes.  Evaluation is eager --
an op computes its value when created, provided all its parents are
bound -- and ``Tape.forward`` re-evaluates the whole graph from the
current leaf bindings, which makes rebinding-based finite-difference
probes cheap.

Ops: input, parameter, constant, add, sub, mul, div, neg, sin, cos,
tanh, exp, softplus, elu, relu, clip, sum, max_over_axis, dot, affine.

Gradient conventions at kinks: relu'(0) = 0; clip passes gradient only
strictly inside the closed interval's interior plus the boundary points
themselves (mask ``lo <= x <= hi``) and is hard zero outside -- no
straight-through estimator.
"""

from __future__ import annotations

import numpy as np


class GraphError(RuntimeError):
    """Raised for malformed graph usage (unbound leaves, bad shapes, ...)."""


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint over the axes numpy broadcasting introduced."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _sigmoid(v: np.ndarray) -> np.ndarray:
    flat = np.ravel(np.asarray(v, dtype=np.float64))
    out = np.empty_like(flat)
    pos = flat >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-flat[pos]))
    ev = np.exp(flat[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out.reshape(np.shape(v))


class Node:
    """One vertex of the expression graph."""

    __slots__ = ("op", "parents", "value", "adjoint", "name", "meta", "tape")

    def __init__(self, tape: "Tape", op: str, parents: tuple, value, name=None, meta=None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.value = value
        self.adjoint = None
        self.name = name
        self.meta = meta

    # Arithmetic sugar; non-node operands become constants on the same tape.
    def _lift(self, other) -> "Node":
        return other if isinstance(other, Node) else self.tape.constant(other)

    def __add__(self, other):
        return self.tape._binary("add", self, self._lift(other))

    def __radd__(self, other):
        return self.tape._binary("add", self._lift(other), self)

    def __sub__(self, other):
        return self.tape._binary("sub", self, self._lift(other))

    def __rsub__(self, other):
        return self.tape._binary("sub", self._lift(other), self)

    def __mul__(self, other):
        return self.tape._binary("mul", self, self._lift(other))

    def __rmul__(self, other):
        return self.tape._binary("mul", self._lift(other), self)

    def __truediv__(self, other):
        return self.tape._binary("div", self, self._lift(other))

    def __rtruediv__(self, other):
        return self.tape._binary("div", self._lift(other), self)

    def __neg__(self):
        return self.tape._unary("neg", self)

    def __repr__(self):
        shape = None if self.value is None else np.shape(self.value)
        tag = f" name={self.name!r}" if self.name else ""
        return f"<Node {self.op}{tag} shape={shape}>"


class Tape:
    """Ordered node list plus leaf registries.

    Leaves are created through ``parameter``/``input``/``constant``; every
    other node comes from an op builder.  ``backward`` returns the adjoint
    of each named leaf with respect to a scalar root.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.parameters: dict[str, Node] = {}
        self.inputs: dict[str, Node] = {}

    # -- leaves -------------------------------------------------------------

    def parameter(self, name: str, value) -> Node:
        if name in self.parameters:
            raise GraphError(f"parameter {name!r} already registered")
        node = self._append(
            Node(self, "parameter", (), np.array(value, dtype=np.float64), name=name)
        )
        self.parameters[name] = node
        return node

    def input(self, name: str, value=None) -> Node:
        if name in self.inputs:
            raise GraphError(f"input {name!r} already registered")
        val = None if value is None else np.array(value, dtype=np.float64)
        node = self._append(Node(self, "input", (), val, name=name))
        self.inputs[name] = node
        return node

    def constant(self, value) -> Node:
        return self._append(Node(self, "constant", (), np.array(value, dtype=np.float64)))

    def bind(self, name: str, value) -> None:
        """Rebind a named leaf; call ``forward`` afterwards to propagate."""
        node = self.parameters.get(name) or self.inputs.get(name)
        if node is None:
            raise GraphError(f"no leaf named {name!r}")
        node.value = np.array(value, dtype=np.float64)

    # -- op builders ----------------------------------------------------------

    def _append(self, node: Node) -> Node:
        self.nodes.append(node)
        return node

    def _unary(self, op: str, a: Node, meta=None) -> Node:
        value = None if a.value is None else _EVAL[op](a.value, meta)
        return self._append(Node(self, op, (a,), value, meta=meta))

    def _binary(self, op: str, a: Node, b: Node, meta=None) -> Node:
        if a.value is None or b.value is None:
            value = None
        else:
            value = _EVAL[op]((a.value, b.value), meta)
        return self._append(Node(self, op, (a, b), value, meta=meta))

    def add(self, a, b):
        return self._binary("add", a, b)

    def sub(self, a, b):
        return self._binary("sub", a, b)

    def mul(self, a, b):
        return self._binary("mul", a, b)

    def div(self, a, b):
        return self._binary("div", a, b)

    def neg(self, a):
        return self._unary("neg", a)

    def sin(self, a):
        return self._unary("sin", a)

    def cos(self, a):
        return self._unary("cos", a)

    def tanh(self, a):
        return self._unary("tanh", a)

    def exp(self, a):
        return self._unary("exp", a)

    def softplus(self, a):
        return self._unary("softplus", a)

    def elu(self, a):
        return self._unary("elu", a)

    def relu(self, a):
        return self._unary("relu", a)

    def clip(self, a, lo, hi):
        lo = -np.inf if lo is None else lo
        hi = np.inf if hi is None else hi
        return self._unary("clip", a, meta=(np.asarray(lo, dtype=np.float64),
                                            np.asarray(hi, dtype=np.float64)))

    def sum(self, a, axis=None):
        return self._unary("sum", a, meta=axis)

    def max_over_axis(self, a, axis: int):
        return self._unary("max_over_axis", a, meta=axis)

    def dot(self, a, b):
        return self._binary("dot", a, b)

    def affine(self, x, w, b=None, transpose: bool = False):
        """``x @ w.T (+ b)``, or ``x @ w (+ b)`` when ``transpose`` is set."""
        parents = (x, w) if b is None else (x, w, b)
        if any(p.value is None for p in parents):
            value = None
        else:
            value = _eval_affine(tuple(p.value for p in parents), transpose)
        return self._append(Node(self, "affine", parents, value, meta=transpose))

    # -- abs is sugar over listed ops (subgradient 0 at the origin) ----------

    def abs(self, a):
        return self.add(self.relu(a), self.relu(self.neg(a)))

    # -- evaluation -----------------------------------------------------------

    def forward(self, root: Node | None = None):
        """Recompute every node from the current leaf bindings."""
        for node in self.nodes:
            if node.op in ("parameter", "input", "constant"):
                if node.value is None:
                    raise GraphError(f"unbound leaf {node.name!r}")
                continue
            if node.op == "affine":
                node.value = _eval_affine(
                    tuple(p.value for p in node.parents), node.meta
                )
            elif len(node.parents) == 1:
                node.value = _EVAL[node.op](node.parents[0].value, node.meta)
            else:
                node.value = _EVAL[node.op](
                    (node.parents[0].value, node.parents[1].value), node.meta
                )
        root = root if root is not None else self.nodes[-1]
        return root.value

    def backward(self, root: Node) -> dict[str, np.ndarray]:
        """Adjoints of a scalar root w.r.t. every named leaf.

        Returns {leaf name: gradient array}; unnamed constants are skipped.
        """
        if root.value is None:
            raise GraphError("root is unbound; run forward first")
        if np.ndim(root.value) != 0:
            raise GraphError(
                f"backward requires a scalar root, got shape {np.shape(root.value)}"
            )
        for node in self.nodes:
            node.adjoint = None
        root.adjoint = np.asarray(1.0)
        for node in reversed(self.nodes):
            if node.adjoint is None or not node.parents:
                continue
            _BACKWARD[node.op](node)
        grads: dict[str, np.ndarray] = {}
        for name, node in self.parameters.items():
            grads[name] = (
                np.zeros_like(node.value) if node.adjoint is None else node.adjoint
            )
        for name, node in self.inputs.items():
            grads[name] = (
                np.zeros_like(node.value) if node.adjoint is None else node.adjoint
            )
        return grads


# ---------------------------------------------------------------------------
# Forward rules
# ---------------------------------------------------------------------------

def _eval_dot(vals, _meta):
    a, b = vals
    if a.ndim == 1 and b.ndim == 1:
        return a @ b
    if a.ndim == 2 and b.ndim == 1:
        return a @ b
    if a.ndim == 2 and b.ndim == 2 and a.shape == b.shape:
        return np.einsum("ij,ij->i", a, b)
    raise GraphError(f"dot: unsupported shapes {a.shape} x {b.shape}")


def _eval_affine(vals, transpose):
    x, w = vals[0], vals[1]
    out = x @ w if transpose else x @ w.T
    if len(vals) == 3:
        out = out + vals[2]
    return out


_EVAL = {
    "add": lambda v, m: v[0] + v[1],
    "sub": lambda v, m: v[0] - v[1],
    "mul": lambda v, m: v[0] * v[1],
    "div": lambda v, m: v[0] / v[1],
    "neg": lambda v, m: -v,
    "sin": lambda v, m: np.sin(v),
    "cos": lambda v, m: np.cos(v),
    "tanh": lambda v, m: np.tanh(v),
    "exp": lambda v, m: np.exp(v),
    "softplus": lambda v, m: np.log1p(np.exp(-np.abs(v))) + np.maximum(v, 0.0),
    "elu": lambda v, m: np.where(v >= 0.0, v, np.expm1(v)),
    "relu": lambda v, m: np.maximum(v, 0.0),
    "clip": lambda v, m: np.clip(v, m[0], m[1]),
    "sum": lambda v, m: v.sum(axis=m),
    "max_over_axis": lambda v, m: v.max(axis=m),
    "dot": _eval_dot,
}


# ---------------------------------------------------------------------------
# Backward rules
# ---------------------------------------------------------------------------

def _acc(parent: Node, grad) -> None:
    grad = _unbroadcast(np.asarray(grad, dtype=np.float64), np.shape(parent.value))
    if parent.adjoint is None:
        parent.adjoint = grad
    else:
        parent.adjoint = parent.adjoint + grad


def _bw_add(n):
    a, b = n.parents
    _acc(a, n.adjoint)
    _acc(b, n.adjoint)


def _bw_sub(n):
    a, b = n.parents
    _acc(a, n.adjoint)
    _acc(b, -n.adjoint)


def _bw_mul(n):
    a, b = n.parents
    _acc(a, n.adjoint * b.value)
    _acc(b, n.adjoint * a.value)


def _bw_div(n):
    a, b = n.parents
    _acc(a, n.adjoint / b.value)
    _acc(b, -n.adjoint * a.value / (b.value * b.value))


def _bw_neg(n):
    _acc(n.parents[0], -n.adjoint)


def _bw_sin(n):
    _acc(n.parents[0], n.adjoint * np.cos(n.parents[0].value))


def _bw_cos(n):
    _acc(n.parents[0], -n.adjoint * np.sin(n.parents[0].value))


def _bw_tanh(n):
    _acc(n.parents[0], n.adjoint * (1.0 - n.value * n.value))


def _bw_exp(n):
    _acc(n.parents[0], n.adjoint * n.value)


def _bw_softplus(n):
    _acc(n.parents[0], n.adjoint * _sigmoid(n.parents[0].value))


def _bw_elu(n):
    v = n.parents[0].value
    _acc(n.parents[0], n.adjoint * np.where(v >= 0.0, 1.0, n.value + 1.0))


def _bw_relu(n):
    _acc(n.parents[0], n.adjoint * (n.parents[0].value > 0.0))


def _bw_clip(n):
    v = n.parents[0].value
    lo, hi = n.meta
    mask = (v >= lo) & (v <= hi)
    _acc(n.parents[0], n.adjoint * mask)


def _bw_sum(n):
    parent = n.parents[0]
    axis = n.meta
    grad = np.asarray(n.adjoint, dtype=np.float64)
    if axis is None:
        _acc(parent, np.broadcast_to(grad, np.shape(parent.value)))
    else:
        _acc(parent, np.broadcast_to(
            np.expand_dims(grad, axis=axis), np.shape(parent.value)
        ))


def _bw_max(n):
    # Route through the first maximizer along the axis (earliest index).
    parent = n.parents[0]
    axis = n.meta
    v = parent.value
    grad = np.zeros_like(v)
    idx = np.expand_dims(v.argmax(axis=axis), axis=axis)
    np.put_along_axis(
        grad, idx, np.expand_dims(np.asarray(n.adjoint, dtype=np.float64), axis=axis), axis=axis
    )
    _acc(parent, grad)


def _bw_dot(n):
    a, b = n.parents
    g = np.asarray(n.adjoint, dtype=np.float64)
    av, bv = a.value, b.value
    if av.ndim == 1 and bv.ndim == 1:
        _acc(a, g * bv)
        _acc(b, g * av)
    elif av.ndim == 2 and bv.ndim == 1:
        _acc(a, np.outer(g, bv))
        _acc(b, g @ av)
    else:  # rowwise 2-D dot
        _acc(a, g[:, None] * bv)
        _acc(b, g[:, None] * av)


def _bw_affine(n):
    parents = n.parents
    x, w = parents[0], parents[1]
    transpose = n.meta
    g = np.asarray(n.adjoint, dtype=np.float64)
    xv, wv = x.value, w.value
    g2 = np.atleast_2d(g)
    x2 = np.atleast_2d(xv)
    if transpose:
        _acc(x, g @ wv.T if g.ndim > 1 else wv @ g)
        _acc(w, x2.T @ g2)
    else:
        _acc(x, g @ wv)
        _acc(w, g2.T @ x2)
    if len(parents) == 3:
        b = parents[2]
        _acc(b, g)


_BACKWARD = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "neg": _bw_neg,
    "sin": _bw_sin,
    "cos": _bw_cos,
    "tanh": _bw_tanh,
    "exp": _bw_exp,
    "softplus": _bw_softplus,
    "elu": _bw_elu,
    "relu": _bw_relu,
    "clip": _bw_clip,
    "sum": _bw_sum,
    "max_over_axis": _bw_max,
    "dot": _bw_dot,
    "affine": _bw_affine,
}
