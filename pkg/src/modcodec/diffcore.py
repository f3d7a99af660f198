"""Reverse-mode differentiation over dense float64 arrays.

Every vector-Jacobian product is itself written in terms of the primitives
below, so a gradient computed with ``create_graph=True`` is an ordinary
graph node and can be differentiated again. That is all the meta-learning
outer loop needs: it differentiates through a few gradient-descent steps.

The high-level entry points (:func:`evaluate`, :func:`gradient`,
:func:`gradient_of_gradient`) take an expression as a Python callable over
named leaves::

    >>> f = lambda x: mean_squares(x)
    >>> gradient(f, {"x": np.array([1.0, 2.0])}, "x")
    array([1., 2.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Var", "ShapeError", "DiffError", "no_grad", "grad_enabled", "constant", "leaf",
    "add", "add_const", "mul", "scale", "sin", "cos", "matmul", "transpose",
    "reshape", "sum_to", "broadcast_to", "mean_squares", "grad",
    "evaluate", "gradient", "gradient_of_gradient",
]

_GRAD_ENABLED = True


class DiffError(ValueError):
    pass


class ShapeError(DiffError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build values only; nothing is recorded for differentiation."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def grad_enabled():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, True
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Var:
    """A node: a float64 array plus the edges needed to differentiate it.

    ``parents`` holds ``(input, vjp)`` pairs where ``vjp`` maps the cotangent
    of this node (a Var) to the cotangent contribution for ``input``.
    """

    __slots__ = ("value", "parents", "requires_grad", "op", "_cache", "__weakref__")

    def __init__(self, value, parents=(), requires_grad=False, op="leaf"):
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self.op = op
        self._cache = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, _as_var(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_var(other), -1.0))

    def __rsub__(self, other):
        return add(_as_var(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_var(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_var(other))

    @property
    def T(self):
        return transpose(self)


def constant(value) -> Var:
    return Var(np.asarray(value, dtype=np.float64))


def leaf(value) -> Var:
    """A differentiable input."""
    return Var(np.array(value, dtype=np.float64), requires_grad=True)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else constant(x)


def _node(value, op, edges) -> Var:
    """Attach edges for inputs that need gradients (only when recording)."""
    if _GRAD_ENABLED:
        parents = tuple((v, fn) for v, fn in edges if v.requires_grad)
        if parents:
            return Var(value, parents, True, op)
    return Var(value, (), False, op)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives

def add(a: Var, b: Var) -> Var:
    _broadcast_shape("add", a, b)
    return _node(a.value + b.value, "add", (
        (a, lambda g: sum_to(g, a.shape)),
        (b, lambda g: sum_to(g, b.shape)),
    ))


def add_const(a: Var, c) -> Var:
    """``a + c`` for a non-differentiable constant ``c``."""
    return _node(a.value + c, "add_const", ((a, lambda g: g),))


def mul(a: Var, b: Var) -> Var:
    _broadcast_shape("mul", a, b)
    return _node(a.value * b.value, "mul", (
        (a, lambda g: sum_to(mul(g, b), a.shape)),
        (b, lambda g: sum_to(mul(g, a), b.shape)),
    ))


def scale(a: Var, c: float) -> Var:
    return _node(a.value * c, "scale", ((a, lambda g: scale(g, c)),))


def sin(x: Var) -> Var:
    out = _node(np.sin(x.value), "sin", ((x, lambda g: mul(g, cos(x, _sin=out))),))
    return out


def cos(x: Var, _sin: Var | None = None) -> Var:
    # Derivatives of sin/cos alternate; remembering the partner node avoids
    # recomputing the same trig values when differentiating twice.
    if _sin is not None:
        cached = _sin._cache
        if cached is not None and (cached.requires_grad or not _GRAD_ENABLED or not x.requires_grad):
            return cached
    out = _node(np.cos(x.value), "cos", ((x, lambda g: mul(g, _neg_sin(x, out))),))
    out._cache = _sin
    if _sin is not None:
        _sin._cache = out
    return out


def _neg_sin(x: Var, cos_node: Var) -> Var:
    s = cos_node._cache
    if s is None or not (s.requires_grad or not _GRAD_ENABLED or not x.requires_grad):
        s = sin(x)
        s._cache = cos_node
        cos_node._cache = s
    return scale(s, -1.0)


def transpose(a: Var) -> Var:
    """Swap the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 dims, got shape {a.shape}")
    return _node(np.swapaxes(a.value, -1, -2), "transpose", ((a, lambda g: transpose(g)),))


def reshape(a: Var, shape) -> Var:
    shape = tuple(shape)
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _node(value, "reshape", ((a, lambda g: reshape(g, src)),))


def sum_to(a: Var, shape) -> Var:
    """Sum broadcast axes away so the result has ``shape``."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    value = a.value
    lead = value.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    if lead:
        value = value.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and value.shape[i] != 1)
    if axes:
        value = value.sum(axis=axes, keepdims=True)
    if value.shape != shape:
        raise ShapeError(f"sum_to: cannot reduce {a.shape} to {shape}")
    src = a.shape
    return _node(value, "sum_to", ((a, lambda g: broadcast_to(g, src)),))


def broadcast_to(a: Var, shape) -> Var:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    try:
        value = np.broadcast_to(a.value, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    src = a.shape
    return _node(value, "broadcast_to", ((a, lambda g: sum_to(g, src)),))


def matmul(a: Var, b: Var) -> Var:
    """Matrix product with numpy semantics; 1-d operands act as vectors."""
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    try:
        value = np.matmul(a.value, b.value)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None
    return _node(value, "matmul", (
        (a, lambda g: sum_to(matmul(g, transpose(b)), a.shape)),
        (b, lambda g: sum_to(matmul(transpose(a), g), b.shape)),
    ))


def mean_squares(a: Var) -> Var:
    """Mean of the squared entries, a scalar."""
    n = a.value.size
    if n == 0:
        raise ShapeError("mean_squares: empty array")
    flat = a.value.ravel()
    value = np.array(np.dot(flat, flat) / n)
    return _node(value, "mean_squares", (
        (a, lambda g: mul(broadcast_to(g, a.shape), scale(a, 2.0 / n))),
    ))


# ---------------------------------------------------------------- reverse pass

def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output: Var, inputs, create_graph: bool = False) -> list[Var]:
    """Gradients of scalar ``output`` with respect to each of ``inputs``.

    With ``create_graph=True`` the returned Vars carry their own graph and
    may be differentiated again.
    """
    if output.value.size != 1:
        raise DiffError(f"grad: output must be a scalar, got shape {output.shape}")
    inputs = list(inputs)
    keep = {id(x) for x in inputs}
    ctx = grad_enabled() if create_graph else no_grad()
    order = _toposort(output)
    # Only walk edges that lead to a requested input.
    relevant = set(keep)
    for node in order:
        if any(id(p) in relevant for p, _ in node.parents):
            relevant.add(id(node))
    with ctx:
        cot = {id(output): constant(np.ones_like(output.value))}
        for node in reversed(order):
            g = cot.get(id(node)) if id(node) in keep else cot.pop(id(node), None)
            if g is None:
                continue
            for parent, vjp in node.parents:
                if id(parent) not in relevant:
                    continue
                contrib = vjp(g)
                prev = cot.get(id(parent))
                cot[id(parent)] = contrib if prev is None else add(prev, contrib)
        result = []
        for x in inputs:
            g = cot.get(id(x))
            result.append(g if g is not None else constant(np.zeros_like(x.value)))
    return result


# ---------------------------------------------------------------- named-leaf API

Expr = Callable[..., Var]


def _bind(leaves: Mapping[str, np.ndarray], names) -> dict[str, Var]:
    bound = {}
    for k, v in leaves.items():
        bound[k] = leaf(v) if k in names else constant(v)
    return bound


def _check_names(leaves, *names):
    for name in names:
        if name not in leaves:
            raise DiffError(f"unknown leaf {name!r}; bound leaves are {sorted(leaves)}")


def evaluate(expr: Expr, leaves: Mapping[str, np.ndarray]) -> np.ndarray:
    with no_grad():
        return expr(**{k: constant(v) for k, v in leaves.items()}).value.copy()


def gradient(expr: Expr, leaves: Mapping[str, np.ndarray], wrt: str) -> np.ndarray:
    _check_names(leaves, wrt)
    bound = _bind(leaves, {wrt})
    with grad_enabled():
        out = expr(**bound)
    (g,) = grad(out, [bound[wrt]])
    return g.value.copy()


def gradient_of_gradient(expr: Expr, leaves: Mapping[str, np.ndarray], inner_wrt: str,
                         outer_wrt: str, reduce: Callable[[Var], Var] | None = None) -> np.ndarray:
    """d/d(outer_wrt) of ``reduce(d expr / d inner_wrt)``.

    ``reduce`` maps the inner gradient to a scalar; it defaults to summing
    its entries.
    """
    _check_names(leaves, inner_wrt, outer_wrt)
    bound = _bind(leaves, {inner_wrt, outer_wrt})
    with grad_enabled():
        out = expr(**bound)
        (g,) = grad(out, [bound[inner_wrt]], create_graph=True)
        s = reduce(g) if reduce is not None else sum_to(g, ())
    (gg,) = grad(s, [bound[outer_wrt]])
    return gg.value.copy()
