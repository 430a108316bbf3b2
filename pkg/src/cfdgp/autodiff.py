"""A small reverse-mode differentiation tape over numpy arrays, plus Adam.

Only the operations the sparse/deep GP objective needs are provided.
A ``Var`` created from constants records nothing, so the same code path
serves both training (with gradients) and plain evaluation.

Example
-------
>>> x = variable(np.array([1.0, 2.0]))
>>> y = sum(exp(x) * x)
>>> (gx,) = grad(y, [x])
"""

import numpy as np
from scipy.linalg import solve_triangular

__all__ = [
    "Var",
    "variable",
    "constant",
    "grad",
    "exp",
    "log",
    "sqrt",
    "square",
    "sum",
    "mean",
    "matmul",
    "clip_min",
    "cholesky",
    "solve_tri",
    "diag_part",
    "concat",
    "custom",
    "Adam",
]


class Var:
    """Node of the computation graph holding a float64 array."""

    __slots__ = ("value", "parents", "requires_grad")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), requires_grad=False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Var(shape={self.value.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def mT(self):
        return swap_last(self)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def variable(x):
    return Var(np.array(x, dtype=np.float64), requires_grad=True)


def constant(x):
    return x if isinstance(x, Var) else Var(x)


def custom(value, *pairs):
    """Record an op computed outside the tape.

    ``pairs`` are ``(parent, vjp)`` with ``vjp(g)`` returning the gradient
    for that parent given the output gradient ``g``.
    """
    return _node(value, *[(constant(p), f) for p, f in pairs])


def _node(value, *pairs):
    live = tuple((p, f) for p, f in pairs if p.requires_grad)
    if not live:
        return Var(value)
    return Var(value, live, True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def add(a, b):
    a, b = constant(a), constant(b)
    return _node(
        a.value + b.value,
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def neg(a):
    a = constant(a)
    return _node(-a.value, (a, lambda g: -g))


def mul(a, b):
    a, b = constant(a), constant(b)
    return _node(
        a.value * b.value,
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def div(a, b):
    a, b = constant(a), constant(b)
    out = a.value / b.value
    return _node(
        out,
        (a, lambda g: _unbroadcast(g / b.value, a.shape)),
        (b, lambda g: _unbroadcast(-g * out / b.value, b.shape)),
    )


def power(a, p):
    a = constant(a)
    return _node(a.value**p, (a, lambda g: g * p * a.value ** (p - 1)))


def square(a):
    a = constant(a)
    return _node(a.value * a.value, (a, lambda g: 2.0 * g * a.value))


def exp(a):
    a = constant(a)
    out = np.exp(a.value)
    return _node(out, (a, lambda g: g * out))


def log(a):
    a = constant(a)
    return _node(np.log(a.value), (a, lambda g: g / a.value))


def sqrt(a):
    """Square root whose derivative is taken as 0 at 0 instead of inf."""
    a = constant(a)
    out = np.sqrt(a.value)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return np.where(out > 0, 0.5 * g / safe, 0.0)

    return _node(out, (a, vjp))


def clip_min(a, lo):
    a = constant(a)
    return _node(np.maximum(a.value, lo), (a, lambda g: g * (a.value > lo)))


def sum(a, axis=None, keepdims=False):
    a = constant(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()

    return _node(out, (a, vjp))


def mean(a, axis=None, keepdims=False):
    a = constant(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape):
    a = constant(a)
    return _node(a.value.reshape(shape), (a, lambda g: g.reshape(a.shape)))


def swap_last(a):
    a = constant(a)
    return _node(_swap(a.value), (a, _swap))


def getitem(a, idx):
    a = constant(a)

    def vjp(g):
        out = np.zeros_like(a.value)
        np.add.at(out, idx, g)
        return out

    return _node(a.value[idx], (a, vjp))


def matmul(a, b):
    a, b = constant(a), constant(b)
    return _node(
        a.value @ b.value,
        (a, lambda g: _unbroadcast(g @ _swap(b.value), a.shape)),
        (b, lambda g: _unbroadcast(_swap(a.value) @ g, b.shape)),
    )


def diag_part(a):
    """Diagonal of the trailing two axes."""
    a = constant(a)
    n = a.shape[-1]
    idx = np.arange(n)

    def vjp(g):
        out = np.zeros_like(a.value)
        out[..., idx, idx] = g
        return out

    return _node(np.diagonal(a.value, axis1=-2, axis2=-1).copy(), (a, vjp))


def concat(items, axis=-1):
    items = [constant(x) for x in items]
    sizes = np.cumsum([x.shape[axis] for x in items])[:-1]

    def make(i):
        return lambda g: np.split(g, sizes, axis=axis)[i]

    return _node(
        np.concatenate([x.value for x in items], axis=axis),
        *[(x, make(i)) for i, x in enumerate(items)],
    )


def cholesky(a, jitter=0.0):
    """Lower Cholesky factor of ``a + jitter * I``; gradient w.r.t. symmetric ``a``."""
    a = constant(a)
    n = a.shape[-1]
    L = np.linalg.cholesky(a.value + jitter * np.eye(n))

    def vjp(g):
        P = np.tril(L.T @ g)
        P[np.diag_indices(n)] *= 0.5
        tmp = solve_triangular(L, P, lower=True, trans=1, check_finite=False)
        abar = solve_triangular(L, tmp.T, lower=True, trans=1, check_finite=False).T
        return 0.5 * (abar + abar.T)

    return _node(L, (a, vjp))


def _as_columns(b, m):
    """Fold (..., m, k) into (m, prod) so scipy can solve it in one call."""
    if b.ndim == 1:
        return b[:, None]
    return np.moveaxis(b, -2, 0).reshape(m, -1)


def _from_columns(x, shape):
    if len(shape) == 1:
        return x[:, 0]
    moved = (shape[-2],) + tuple(shape[:-2]) + (shape[-1],)
    return np.moveaxis(x.reshape(moved), 0, -2)


def solve_tri(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b``) for lower-triangular 2-D ``L``.

    ``b`` may carry leading batch axes: shape (..., m, k) or (m,).
    """
    L, b = constant(L), constant(b)
    m = L.shape[0]
    b2 = _as_columns(b.value, m)
    x2 = solve_triangular(L.value, b2, lower=True, trans=int(trans), check_finite=False)
    x = _from_columns(x2, b.shape)

    memo = {}

    def solved(g):
        # both parents need the same back-solve; grad() hands them the same g
        if memo.get("g") is not g:
            memo["g"] = g
            memo["v"] = solve_triangular(L.value, _as_columns(g, m), lower=True,
                                         trans=int(not trans), check_finite=False)
        return memo["v"]

    def vjp_b(g):
        return _from_columns(solved(g), b.shape)

    def vjp_L(g):
        bbar = solved(g)
        if trans:
            return -np.tril(x2 @ bbar.T)
        return -np.tril(bbar @ x2.T)

    return _node(x, (b, vjp_b), (L, vjp_L))


def grad(output, wrt):
    """Gradients of scalar ``output`` with respect to each Var in ``wrt``."""
    order = []
    seen = set()
    stack = [(output, False)]
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

    grads = {id(output): np.ones_like(output.value)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
    return [grads.get(id(v), np.zeros_like(v.value)) for v in wrt]


class Adam:
    """Adaptive moment estimation (Kingma & Ba), minimising by default."""

    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params, grads):
        """Update ``params`` (a dict of arrays) in place from ``grads``."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name, 0.0)
            v = self.v.get(name, 0.0)
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[name] = m
            self.v[name] = v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

