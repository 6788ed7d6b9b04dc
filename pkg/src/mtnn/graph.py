"""Reverse-mode automatic differentiation over numpy arrays.

A deliberately small engine: the handful of primitives below is exactly what
the dense-network forward pass, the analytic input-Jacobian chain, and the
penalty terms need. Everything is double precision. Each primitive stores a
vector-Jacobian closure; `backward` walks the graph once in reverse
topological order and accumulates gradients on the leaves.

Shape conventions are batch-first throughout:
    (B, N)       batched vectors
    (B, M, N)    batched matrices
    ()           scalars (reduction outputs)
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class Var:
    """A node in the computation graph: a value plus how to push gradients back."""

    __slots__ = ("value", "grad", "parents", "vjp")

    def __init__(self, value, parents: tuple = (), vjp: Callable | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: Array | None = None
        self.parents = parents
        self.vjp = vjp  # maps grad w.r.t. this node -> tuple of grads per parent

    @property
    def shape(self):
        return self.value.shape

    # Arithmetic sugar. Non-Var operands are treated as constants (no gradient).
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

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def constant(value) -> Var:
    """Wrap a plain array as a leaf that receives no gradient."""
    return Var(value)


def _as_value(x) -> Array:
    if isinstance(x, Var):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _binary(a, b, value, vjp_a, vjp_b) -> Var:
    parents = []
    vjps = []
    if isinstance(a, Var):
        parents.append(a)
        vjps.append(vjp_a)
    if isinstance(b, Var):
        parents.append(b)
        vjps.append(vjp_b)
    return Var(value, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def add(a, b) -> Var:
    av, bv = _as_value(a), _as_value(b)
    _check_broadcast_to_var(a, b, av, bv)
    return _binary(a, b, av + bv, lambda g: g, lambda g: g)


def sub(a, b) -> Var:
    av, bv = _as_value(a), _as_value(b)
    _check_broadcast_to_var(a, b, av, bv)
    return _binary(a, b, av - bv, lambda g: g, lambda g: -g)


def mul(a, b) -> Var:
    av, bv = _as_value(a), _as_value(b)
    _check_broadcast_to_var(a, b, av, bv)
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def _check_broadcast_to_var(a, b, av: Array, bv: Array):
    # Var operands must already carry the full output shape: gradients are
    # accumulated without reduction, so implicit broadcasting is only allowed
    # on the constant side (or by scalars).
    out_shape = np.broadcast_shapes(av.shape, bv.shape)
    for op, v in ((a, av), (b, bv)):
        if isinstance(op, Var) and v.shape != out_shape and v.shape != ():
            raise ValueError(
                f"Var operand of shape {v.shape} would broadcast to {out_shape}; "
                "only constants and scalars may broadcast"
            )


def neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda g: (-g,))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return Var(a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Var) -> Var:
    t = np.tanh(a.value)
    return Var(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a: Var) -> Var:
    s = 0.5 * (np.tanh(0.5 * a.value) + 1.0)  # overflow-free logistic
    return Var(s, (a,), lambda g: (g * s * (1.0 - s),))


def relu(a: Var) -> Var:
    mask = a.value > 0.0  # subgradient 0 at the kink
    return Var(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def linear(x, W, b) -> Var:
    """y[B,O] = x[B,I] @ W[O,I].T + b[O]."""
    xv, Wv, bv = _as_value(x), _as_value(W), _as_value(b)
    val = xv @ Wv.T + bv

    def make(which):
        if which == "x":
            return lambda g: g @ Wv
        if which == "W":
            return lambda g: g.T @ xv
        return lambda g: g.sum(axis=0)

    parents, vjps = [], []
    for op, name in ((x, "x"), (W, "W"), (b, "b")):
        if isinstance(op, Var):
            parents.append(op)
            vjps.append(make(name))
    return Var(val, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def mat_chain(W, G) -> Var:
    """C[B,O,N] = W[O,H] @ G[B,H,N] (per batch element)."""
    Wv, Gv = _as_value(W), _as_value(G)
    val = np.einsum("oh,bhn->bon", Wv, Gv)
    parents, vjps = [], []
    if isinstance(W, Var):
        parents.append(W)
        vjps.append(lambda g: np.einsum("bon,bhn->oh", g, Gv))
    if isinstance(G, Var):
        parents.append(G)
        vjps.append(lambda g: np.einsum("oh,bon->bhn", Wv, g))
    return Var(val, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def scale_rows(d, G) -> Var:
    """out[b,o,:] = d[b,o] * G[b,o,:]."""
    dv, Gv = _as_value(d), _as_value(G)
    val = dv[:, :, None] * Gv
    parents, vjps = [], []
    if isinstance(d, Var):
        parents.append(d)
        vjps.append(lambda g: (g * Gv).sum(axis=-1))
    if isinstance(G, Var):
        parents.append(G)
        vjps.append(lambda g: dv[:, :, None] * g)
    return Var(val, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def bmat_vec(A, v) -> Var:
    """out[B,M] = A[B,M,N] @ v[B,N] (per batch element)."""
    Av, vv = _as_value(A), _as_value(v)
    val = np.einsum("bmn,bn->bm", Av, vv)
    parents, vjps = [], []
    if isinstance(A, Var):
        parents.append(A)
        vjps.append(lambda g: g[:, :, None] * vv[:, None, :])
    if isinstance(v, Var):
        parents.append(v)
        vjps.append(lambda g: np.einsum("bmn,bm->bn", Av, g))
    return Var(val, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def dot_rows(u, v) -> Var:
    """out[B] = sum_n u[B,n] * v[B,n]."""
    uv, vv = _as_value(u), _as_value(v)
    val = (uv * vv).sum(axis=-1)
    parents, vjps = [], []
    if isinstance(u, Var):
        parents.append(u)
        vjps.append(lambda g: g[:, None] * vv)
    if isinstance(v, Var):
        parents.append(v)
        vjps.append(lambda g: g[:, None] * uv)
    return Var(val, tuple(parents), lambda g: tuple(f(g) for f in vjps))


def transpose_last(A: Var) -> Var:
    """Swap the last two axes."""
    return Var(
        np.swapaxes(A.value, -1, -2), (A,), lambda g: (np.swapaxes(g, -1, -2),)
    )


def det(A: Var) -> Var:
    """Batched determinant of A[B,N,N] via LU; gradient is the cofactor matrix."""
    Av = A.value
    val = np.linalg.det(Av)

    def vjp(g):
        return (g[:, None, None] * _cofactor(Av),)

    return Var(val, (A,), vjp)


def _cofactor(A: Array) -> Array:
    """Cofactor matrix C with C[i,j] = d det(A) / d A[i,j], batched.

    Computed from minors so it stays exact at singular matrices, where
    det(A) * inv(A).T is unavailable. N is small here (a handful of states
    and inputs), so the N^2 minor determinants are cheap.
    """
    B, n, _ = A.shape
    if n == 1:
        return np.ones_like(A)
    C = np.empty_like(A)
    rows = np.arange(n)
    for i in range(n):
        minor_rows = A[:, rows != i, :]
        for j in range(n):
            minor = minor_rows[:, :, rows != j]
            C[:, i, j] = ((-1.0) ** (i + j)) * np.linalg.det(minor)
    return C


def concat_last(parts: Sequence) -> Var:
    """Concatenate (B, k_i) pieces along the last axis."""
    values = [_as_value(p) for p in parts]
    val = np.concatenate(values, axis=-1)
    widths = [v.shape[-1] for v in values]
    offsets = np.cumsum([0] + widths)

    spans = [
        (offsets[i], offsets[i + 1]) for i, p in enumerate(parts) if isinstance(p, Var)
    ]
    parents = tuple(p for p in parts if isinstance(p, Var))

    def vjp(g):
        return tuple(g[..., a:b] for a, b in spans)

    return Var(val, parents, vjp)


def stack_cols(parts: Sequence) -> Var:
    """Stack (B,) pieces into (B, K) columns."""
    values = [_as_value(p) for p in parts]
    val = np.stack(values, axis=-1)
    idx = [i for i, p in enumerate(parts) if isinstance(p, Var)]
    parents = tuple(parts[i] for i in idx)

    def vjp(g):
        return tuple(g[..., i] for i in idx)

    return Var(val, parents, vjp)


def col(x: Var, j: int) -> Var:
    """Select column j of (B, K) as (B,)."""
    jj = int(j)

    def vjp(g):
        gx = np.zeros_like(x.value)
        gx[:, jj] = g
        return (gx,)

    return Var(x.value[:, jj], (x,), vjp)


def sum_all(x: Var) -> Var:
    shp = x.value.shape
    return Var(x.value.sum(), (x,), lambda g: (np.broadcast_to(g, shp).copy(),))


def mean_all(x: Var) -> Var:
    n = x.value.size
    return scale(sum_all(x), 1.0 / n)


def backward(root: Var) -> None:
    """Populate .grad on every node reachable from a scalar root."""
    if root.value.shape != ():
        raise ValueError(f"backward expects a scalar root, got shape {root.value.shape}")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, Array] = {id(root): np.ones(())}
    for node in reversed(order):
        g = grads.get(id(node))
        node.grad = g
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
