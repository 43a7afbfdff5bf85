"""Reverse-mode automatic differentiation over numpy arrays.

A Var wraps one ndarray plus the closure needed to push an output gradient
back to its parents. Ops build the graph eagerly; backward() walks it once
in reverse topological order. Only nodes flagged requires_grad keep their
wiring, so a forward pass over frozen weights costs nothing extra on the
way back.

Gradients never flow through integer index arrays (token ids, routing
decisions); those enter ops as plain numpy arrays. Accumulation order is
fixed by the graph, so repeated runs are bit-identical.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Var:
    __slots__ = ("value", "parents", "vjp", "requires_grad", "grad")

    def __init__(
        self,
        value: np.ndarray,
        parents: tuple["Var", ...] = (),
        vjp: Callable | None = None,
        requires_grad: bool = False,
    ) -> None:
        self.value = value
        self.requires_grad = requires_grad
        self.parents = parents if requires_grad else ()
        self.vjp = vjp if requires_grad else None
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Var(shape={self.shape}, requires_grad={self.requires_grad})"


def leaf(value: np.ndarray, requires_grad: bool = False) -> Var:
    return Var(value, requires_grad=requires_grad)


def _node(value, parents: Sequence[Var], vjp: Callable) -> Var:
    if any(p.requires_grad for p in parents):
        return Var(value, tuple(parents), vjp, requires_grad=True)
    return Var(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Var, seed: np.ndarray | None = None) -> None:
    """Accumulate gradients of root w.r.t. every requires_grad ancestor."""
    if not root.requires_grad:
        raise ValueError("backward on a graph with no trainable inputs")
    topo: list[Var] = []
    visited: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    root.grad = np.ones_like(np.asarray(root.value)) if seed is None else seed
    for node in reversed(topo):
        if node.vjp is None:
            continue
        for p, g in zip(node.parents, node.vjp(node.grad)):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# elementwise and broadcasting ops


def add(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            _unbroadcast(g, np.shape(a.value)) if a.requires_grad else None,
            _unbroadcast(g, np.shape(b.value)) if b.requires_grad else None,
        )

    return _node(a.value + b.value, (a, b), vjp)


def sub(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            _unbroadcast(g, np.shape(a.value)) if a.requires_grad else None,
            -_unbroadcast(g, np.shape(b.value)) if b.requires_grad else None,
        )

    return _node(a.value - b.value, (a, b), vjp)


def mul(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            _unbroadcast(g * b.value, np.shape(a.value)) if a.requires_grad else None,
            _unbroadcast(g * a.value, np.shape(b.value)) if b.requires_grad else None,
        )

    return _node(a.value * b.value, (a, b), vjp)


def div(a: Var, b: Var) -> Var:
    def vjp(g):
        ga = _unbroadcast(g / b.value, np.shape(a.value)) if a.requires_grad else None
        gb = (
            _unbroadcast(-g * a.value / (b.value * b.value), np.shape(b.value))
            if b.requires_grad
            else None
        )
        return ga, gb

    return _node(a.value / b.value, (a, b), vjp)


def scale(a: Var, s: float) -> Var:
    s = float(s)

    def vjp(g):
        return (g * s,)

    return _node(a.value * s, (a,), vjp)


def add_const(a: Var, c: np.ndarray) -> Var:
    def vjp(g):
        return (_unbroadcast(g, np.shape(a.value)),)

    return _node(a.value + c, (a,), vjp)


def mul_const(a: Var, c: np.ndarray) -> Var:
    def vjp(g):
        return (_unbroadcast(g * c, np.shape(a.value)),)

    return _node(a.value * c, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a: Var, b: Var) -> Var:
    def vjp(g):
        return (
            g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None,
        )

    return _node(a.value @ b.value, (a, b), vjp)


def transpose(a: Var) -> Var:
    def vjp(g):
        return (g.T,)

    return _node(a.value.T, (a,), vjp)


def reshape(a: Var, shape: tuple) -> Var:
    old = np.shape(a.value)

    def vjp(g):
        return (g.reshape(old),)

    return _node(np.reshape(a.value, shape), (a,), vjp)


def concat_cols(parts: Sequence[Var]) -> Var:
    widths = [np.shape(p.value)[1] for p in parts]
    edges = np.cumsum([0] + widths)

    def vjp(g):
        return tuple(
            g[:, edges[i] : edges[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node(np.concatenate([p.value for p in parts], axis=1), tuple(parts), vjp)


def slice_cols(a: Var, j0: int, j1: int) -> Var:
    def vjp(g):
        z = np.zeros_like(a.value)
        z[:, j0:j1] = g
        return (z,)

    return _node(a.value[:, j0:j1], (a,), vjp)


def slice_rows(a: Var, i0: int, i1: int) -> Var:
    def vjp(g):
        z = np.zeros_like(a.value)
        z[i0:i1] = g
        return (z,)

    return _node(a.value[i0:i1], (a,), vjp)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    idx = np.asarray(idx)

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, idx, g)
        return (z,)

    return _node(a.value[idx], (a,), vjp)


def scatter_rows(rows: Var, idx: np.ndarray, n_rows: int) -> Var:
    """Place rows[i] at output row idx[i]; duplicate indices accumulate."""
    idx = np.asarray(idx)
    out = np.zeros((n_rows,) + np.shape(rows.value)[1:], dtype=np.asarray(rows.value).dtype)
    np.add.at(out, idx, rows.value)

    def vjp(g):
        return (g[idx],)

    return _node(out, (rows,), vjp)


def gather_cols_per_row(a: Var, idx: np.ndarray) -> Var:
    """a[i, idx[i, j]] for a [m, n] Var and an [m, k] index array."""
    idx = np.asarray(idx)
    r = np.arange(idx.shape[0])[:, None]

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, (r, idx), g)
        return (z,)

    return _node(a.value[r, idx], (a,), vjp)


def gather_elems(a: Var, rows: np.ndarray, cols: np.ndarray) -> Var:
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def vjp(g):
        z = np.zeros_like(a.value)
        np.add.at(z, (rows, cols), g)
        return (z,)

    return _node(a.value[rows, cols], (a,), vjp)


def sum_cols(a: Var) -> Var:
    """Row sums, kept as an [m, 1] column."""

    def vjp(g):
        return (np.broadcast_to(g, np.shape(a.value)).copy(),)

    return _node(np.sum(a.value, axis=1, keepdims=True), (a,), vjp)


def mean_axis0(a: Var) -> Var:
    m = np.shape(a.value)[0]

    def vjp(g):
        return (np.broadcast_to(g / m, np.shape(a.value)).copy(),)

    return _node(np.mean(a.value, axis=0), (a,), vjp)


def vsum(a: Var) -> Var:
    def vjp(g):
        return (np.broadcast_to(g, np.shape(a.value)).copy(),)

    return _node(np.sum(a.value), (a,), vjp)


# ---------------------------------------------------------------------------
# fused nonlinear ops


def silu(a: Var) -> Var:
    x = a.value
    sig = np.empty_like(x)
    pos = x >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    sig[~pos] = ex / (1.0 + ex)
    y = x * sig

    def vjp(g):
        return (g * (sig + y * (1.0 - sig)),)

    return _node(y, (a,), vjp)


def softmax_rows(a: Var) -> Var:
    x = a.value
    m = np.max(x, axis=1, keepdims=True)
    e = np.exp(x - m)
    y = e / np.sum(e, axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return _node(y, (a,), vjp)


def rms_norm(x: Var, gamma: Var, eps: float = 1e-5) -> Var:
    xv = x.value
    gv = gamma.value
    d = xv.shape[1]
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=1, keepdims=True) + eps)
    y = xv * inv * gv

    def vjp(g):
        gx = None
        gg = None
        if x.requires_grad:
            dot = np.sum(g * gv * xv, axis=1, keepdims=True)
            gx = gv * g * inv - xv * (inv**3) * dot / d
        if gamma.requires_grad:
            gg = np.sum(g * xv * inv, axis=0)
        return gx, gg

    return _node(y, (x, gamma), vjp)


def rope_rotate(x: Var, cos: np.ndarray, sin: np.ndarray) -> Var:
    """Rotate feature pairs (i, i + d/2) of each row by position angles.

    cos and sin have shape [rows, d/2]; the transpose Jacobian is the same
    rotation with the angle negated.
    """
    xv = x.value
    half = xv.shape[1] // 2
    x1, x2 = xv[:, :half], xv[:, half:]
    y = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=1)

    def vjp(g):
        g1, g2 = g[:, :half], g[:, half:]
        return (np.concatenate([g1 * cos + g2 * sin, g2 * cos - g1 * sin], axis=1),)

    return _node(y, (x,), vjp)


def softmax_xent_mean(logits: Var, targets: np.ndarray) -> Var:
    """Mean cross-entropy of row-wise softmax against integer targets."""
    targets = np.asarray(targets)
    z = logits.value
    n = z.shape[0]
    if targets.shape != (n,):
        raise ValueError(f"targets shape {targets.shape} does not match {n} rows")
    m = np.max(z, axis=1, keepdims=True)
    lse = (m + np.log(np.sum(np.exp(z - m), axis=1, keepdims=True)))[:, 0]
    r = np.arange(n)
    loss = np.mean(lse - z[r, targets])

    def vjp(g):
        probs = np.exp(z - lse[:, None])
        probs[r, targets] -= 1.0
        return (probs * (g / n),)

    return _node(loss, (logits,), vjp)
