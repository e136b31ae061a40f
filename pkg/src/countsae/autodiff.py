"""Reverse-mode automatic differentiation on numpy values.

A tiny tape: every operation on a :class:`Var` records its parents and a
vector-Jacobian product closure, and :func:`backward` replays the graph in
reverse topological order.  Values are plain numpy arrays (or python
scalars), so each node is a whole vector and the per-node overhead stays
small relative to the numpy work.

Only the primitives needed by the log-posterior models are implemented.
Constants (floats / ndarrays) pass through untouched; gradients flow only
into ``Var`` operands.
"""

from __future__ import annotations

import numpy as np
from scipy import special


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if np.shape(g) == shape:
        return g
    if shape == ():
        return np.sum(g)
    while np.ndim(g) > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and np.shape(g)[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _vjp_to(val, out_val):
    """vjp factory for a linear pass-through operand of a broadcast op."""
    sh = np.shape(val)
    if sh == np.shape(out_val):
        return lambda g: g
    return lambda g: _unbroadcast(g, sh)


class Var:
    """A node in the computation graph."""

    __slots__ = ("value", "_parents", "_vjps", "grad")

    # keep numpy from absorbing Var operands into object arrays
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=()):
        self.value = value
        self._parents = parents
        self._vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return np.shape(self.value)

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return Var(-self.value, (self,), (lambda g: -g,))

    def __getitem__(self, idx):
        return gather(self, idx)

    def __repr__(self):
        return f"Var({self.value!r})"


def _val(x):
    return x.value if isinstance(x, Var) else x


def add(a, b):
    av, bv = _val(a), _val(b)
    out = av + bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(_vjp_to(av, out))
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(_vjp_to(bv, out))
    return Var(out, tuple(parents), tuple(vjps))


def sub(a, b):
    av, bv = _val(a), _val(b)
    out = av - bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(_vjp_to(av, out))
    if isinstance(b, Var):
        parents.append(b)
        if np.shape(bv) == np.shape(out):
            vjps.append(lambda g: -g)
        else:
            vjps.append(lambda g, sh=np.shape(bv): _unbroadcast(-g, sh))
    return Var(out, tuple(parents), tuple(vjps))


def mul(a, b):
    av, bv = _val(a), _val(b)
    out = av * bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        if np.shape(av) == np.shape(out):
            vjps.append(lambda g: g * bv)
        else:
            vjps.append(lambda g, sh=np.shape(av): _unbroadcast(g * bv, sh))
    if isinstance(b, Var):
        parents.append(b)
        if np.shape(bv) == np.shape(out):
            vjps.append(lambda g: g * av)
        else:
            vjps.append(lambda g, sh=np.shape(bv): _unbroadcast(g * av, sh))
    return Var(out, tuple(parents), tuple(vjps))


def div(a, b):
    av, bv = _val(a), _val(b)
    out = av / bv
    parents, vjps = [], []
    if isinstance(a, Var):
        parents.append(a)
        if np.shape(av) == np.shape(out):
            vjps.append(lambda g: g / bv)
        else:
            vjps.append(lambda g, sh=np.shape(av): _unbroadcast(g / bv, sh))
    if isinstance(b, Var):
        parents.append(b)
        if np.shape(bv) == np.shape(out):
            vjps.append(lambda g: -g * av / (bv * bv))
        else:
            vjps.append(lambda g, sh=np.shape(bv): _unbroadcast(-g * av / (bv * bv), sh))
    return Var(out, tuple(parents), tuple(vjps))


def exp(a):
    out = np.exp(a.value)
    return Var(out, (a,), (lambda g: g * out,))


def log(a):
    v = a.value
    return Var(np.log(v), (a,), (lambda g: g / v,))


def log1p(a):
    v = a.value
    return Var(np.log1p(v), (a,), (lambda g: g / (1.0 + v),))


def sqrt(a):
    out = np.sqrt(a.value)
    return Var(out, (a,), (lambda g: g * (0.5 / out),))


def square(a):
    v = a.value
    return Var(v * v, (a,), (lambda g: g * (2.0 * v),))


def gammaln(a):
    v = a.value
    return Var(special.gammaln(v), (a,), (lambda g: g * special.digamma(v),))


def vsum(a):
    """Sum all elements to a scalar."""
    sh = np.shape(a.value)
    return Var(np.sum(a.value), (a,), (lambda g: np.broadcast_to(g, sh),))


def gather(a, idx):
    """Index with an integer array or slice; backward scatter-adds."""
    v = a.value
    sh = np.shape(v)
    if isinstance(idx, slice):
        def vjp(g):
            out = np.zeros(sh)
            out[idx] = g
            return out
    else:
        # integer-array indices may repeat, so accumulate
        def vjp(g):
            out = np.zeros(sh)
            np.add.at(out, idx, g)
            return out
    return Var(v[idx], (a,), (vjp,))


def matvec(a, m):
    """Row vector times constant matrix: ``a (N,) @ m (N, R) -> (R,)``."""
    return Var(a.value @ m, (a,), (lambda g: g @ m.T,))


def matvec_left(m, a):
    """Constant matrix times vector: ``m (N, P) @ a (P,) -> (N,)``."""
    return Var(m @ a.value, (a,), (lambda g: m.T @ g,))


def cumsum(a):
    v = a.value
    return Var(np.cumsum(v), (a,), (lambda g: np.cumsum(g[::-1])[::-1],))


def maximum(a, c):
    """Elementwise max against a constant; subgradient 0 on the clamped side."""
    v = a.value
    mask = v > c
    return Var(np.where(mask, v, c), (a,), (lambda g: g * mask,))


def backward(root, seed=1.0):
    """Accumulate gradients of ``root`` (a scalar Var) into ``.grad`` fields."""
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.grad = seed
    for node in reversed(topo):
        g = node.grad
        if g is None:
            continue
        for p, vjp in zip(node._parents, node._vjps):
            contrib = vjp(g)
            p.grad = contrib if p.grad is None else p.grad + contrib


def value_and_grad(root, leaf):
    """Value of ``root`` and gradient with respect to ``leaf``."""
    backward(root)
    g = leaf.grad
    if g is None:
        g = np.zeros(np.shape(leaf.value))
    return float(root.value), np.asarray(g, dtype=float)
