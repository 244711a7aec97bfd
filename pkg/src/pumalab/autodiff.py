"""Minimal reverse-mode autodiff over float64 numpy arrays.

The tape supports gradients of gradients: when ``grad`` is called with
``create_graph=True`` the backward pass itself records new nodes, so a
Hessian-vector product can be taken as the gradient of <grad(f), v>.
Only the handful of primitives needed for small dense classifiers is
implemented; every vector-Jacobian rule is itself written with these
primitives so second derivatives are exact, not approximated.
"""

from __future__ import annotations

import numpy as np

_GRAD_ENABLED = [True]


class no_grad:
    """Suspend graph recording; inside this block ops run at numpy speed."""

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = False
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class _graph_mode:
    def __init__(self, enabled):
        self.enabled = enabled

    def __enter__(self):
        self._prev = _GRAD_ENABLED[0]
        _GRAD_ENABLED[0] = self.enabled
        return self

    def __exit__(self, *exc):
        _GRAD_ENABLED[0] = self._prev
        return False


class Tensor:
    """A float64 array plus the tape record that produced it.

    ``parents`` and ``vjp`` are empty for leaves and constants; ``vjp``
    maps the output cotangent to one cotangent per parent (None for a
    parent that does not need one).
    """

    __slots__ = ("data", "parents", "vjp", "requires_grad")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def leaf(data):
    """A differentiation root (model parameters live here)."""
    return Tensor(data, requires_grad=True)


def const(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def _node(data, parents, vjp):
    # Record only while enabled and only if some parent is differentiable;
    # otherwise the result is a plain constant and the graph stays small.
    if _GRAD_ENABLED[0] and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, parents=parents, vjp=vjp)
    return Tensor(data)


# ---------------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = const(a), const(b)
    out = a.data + b.data

    def vjp(g):
        return sum_to(g, a.data.shape), sum_to(g, b.data.shape)

    return _node(out, (a, b), vjp)


def sub(a, b):
    a, b = const(a), const(b)
    out = a.data - b.data

    def vjp(g):
        return sum_to(g, a.data.shape), neg(sum_to(g, b.data.shape))

    return _node(out, (a, b), vjp)


def neg(a):
    a = const(a)

    def vjp(g):
        return (neg(g),)

    return _node(-a.data, (a,), vjp)


def mul(a, b):
    a, b = const(a), const(b)
    out = a.data * b.data

    def vjp(g):
        return sum_to(mul(g, b), a.data.shape), sum_to(mul(g, a), b.data.shape)

    return _node(out, (a, b), vjp)


def div(a, b):
    a, b = const(a), const(b)
    out = a.data / b.data

    def vjp(g):
        ga = sum_to(div(g, b), a.data.shape)
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), b.data.shape)
        return ga, gb

    return _node(out, (a, b), vjp)


def matmul(a, b):
    a, b = const(a), const(b)
    out = a.data @ b.data

    def vjp(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _node(out, (a, b), vjp)


def transpose(a):
    a = const(a)

    def vjp(g):
        return (transpose(g),)

    return _node(a.data.T, (a,), vjp)


def reshape(a, shape):
    a = const(a)
    old = a.data.shape

    def vjp(g):
        return (reshape(g, old),)

    return _node(a.data.reshape(shape), (a,), vjp)


def broadcast_to(a, shape):
    a = const(a)
    old = a.data.shape

    def vjp(g):
        return (sum_to(g, old),)

    return _node(np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def sum_to(a, shape):
    """Reduce ``a`` back to ``shape`` by summing broadcast axes (adjoint of
    broadcasting). Identity when shapes already agree."""
    a = const(a)
    if a.data.shape == tuple(shape):
        return a
    data = a.data
    # sum away leading axes added by broadcasting, then squashed axes of size 1
    extra = data.ndim - len(shape)
    summed = data.sum(axis=tuple(range(extra))) if extra > 0 else data
    keep = tuple(i for i, s in enumerate(shape) if s == 1 and summed.shape[i] != 1)
    if keep:
        summed = summed.sum(axis=keep, keepdims=True)
    target = tuple(shape)

    def vjp(g):
        return (broadcast_to(g, a.data.shape),)

    return _node(summed.reshape(target), (a,), vjp)


def tsum(a, axis=None, keepdims=False):
    a = const(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    old = a.data.shape

    def vjp(g):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(old)), old),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(old) for ax in axes)
        if keepdims:
            mid = g
        else:
            kshape = tuple(1 if i in axes else s for i, s in enumerate(old))
            mid = reshape(g, kshape)
        return (broadcast_to(mid, old),)

    return _node(out, (a,), vjp)


def tmean(a, axis=None, keepdims=False):
    a = const(a)
    n = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a):
    a = const(a)
    out_data = np.exp(a.data)

    def vjp(g):
        return (mul(g, out),)

    out = _node(out_data, (a,), vjp)
    return out


def log(a):
    a = const(a)

    def vjp(g):
        return (div(g, a),)

    return _node(np.log(a.data), (a,), vjp)


def tanh(a):
    a = const(a)
    out_data = np.tanh(a.data)

    def vjp(g):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _node(out_data, (a,), vjp)
    return out


def relu(a):
    # subgradient at 0 is 0; the mask is constant w.r.t. differentiation
    a = const(a)
    mask = (a.data > 0).astype(np.float64)

    def vjp(g):
        return (mul(g, mask),)

    return _node(a.data * mask, (a,), vjp)


def gather_rows(a, cols):
    """Pick ``a[i, cols[i]]`` for every row i. Adjoint is scatter_rows."""
    a = const(a)
    cols = np.asarray(cols, dtype=np.intp)
    rows = np.arange(a.data.shape[0])
    shape = a.data.shape

    def vjp(g):
        return (scatter_rows(g, cols, shape),)

    return _node(a.data[rows, cols], (a,), vjp)


def scatter_rows(a, cols, shape):
    a = const(a)
    cols = np.asarray(cols, dtype=np.intp)
    out = np.zeros(shape, dtype=np.float64)
    out[np.arange(shape[0]), cols] = a.data

    def vjp(g):
        return (gather_rows(g, cols),)

    return _node(out, (a,), vjp)


# ---------------------------------------------------------------------------
# composites


def logsumexp_rows(z):
    """Row-wise log-sum-exp of a 2-D tensor, shift-stabilized.

    The shift is a frozen constant; log(sum(exp(z - m))) + m equals the
    true logsumexp identically in z for any fixed m, so derivatives of
    every order are exact.
    """
    m = np.max(z.data, axis=1, keepdims=True)
    shifted = sub(z, m)
    return add(log(tsum(exp(shifted), axis=1)), m[:, 0])


def softmax_rows(z):
    lse = logsumexp_rows(z)
    return exp(sub(z, reshape(lse, (z.shape[0], 1))))


def dot(a, b):
    return tsum(mul(a, b))


# ---------------------------------------------------------------------------
# backward


def grad(output, inputs, create_graph=False):
    """Cotangents of a scalar ``output`` w.r.t. ``inputs``.

    With ``create_graph`` the returned tensors are themselves
    differentiable, enabling Hessian-vector products.
    """
    if output.data.size != 1:
        raise ValueError("grad expects a scalar output")
    topo = []
    seen = set()
    stack = [(output, False)]
    while stack:
        node, done = stack.pop()
        if id(node) in seen:
            continue
        if done:
            seen.add(id(node))
            topo.append(node)
            continue
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    cot = {id(output): const(np.ones_like(output.data))}
    with _graph_mode(create_graph):
        for node in reversed(topo):
            g = cot.get(id(node))
            if g is None or node.vjp is None:
                continue
            del cot[id(node)]  # interior cotangent fully consumed; leaves keep theirs
            parent_cots = node.vjp(g)
            for p, pg in zip(node.parents, parent_cots):
                if pg is None or not p.requires_grad:
                    continue
                prev = cot.get(id(p))
                cot[id(p)] = pg if prev is None else add(prev, pg)
        out = []
        for inp in inputs:
            g = cot.get(id(inp))
            out.append(g if g is not None else const(np.zeros_like(inp.data)))
    return out
