"""Reverse-mode automatic differentiation over dense float64 matrices.

The graph is built eagerly: every primitive returns a new `Var` node that
remembers its parents and how to push an adjoint back to them. The
primitive set is closed — matmul, add, scale (by constants), relu,
row_softmax, log, exp, sumv, pearson — and every differentiable model in
this package is composed from it. All values are 2-D; scalars live in
(1, 1) arrays.

Calling `backward(root)` on a scalar node fills `grad` on every node
reachable from it. Reruns with identical inputs are bit-deterministic:
there is no randomness and the accumulation order is fixed by the graph.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class Var:
    """One node of the autodiff graph: a value and, after backward, its adjoint."""

    __slots__ = ("value", "grad", "_parents", "_backward")

    def __init__(
        self,
        value,
        parents: Sequence["Var"] = (),
        backward_fn: Optional[Callable[[], None]] = None,
    ):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ValueError(f"tape values must be at most 2-D, got shape {v.shape}")
        self.value = v
        self.grad: Optional[np.ndarray] = None
        self._parents = tuple(parents)
        self._backward = backward_fn

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape})"


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    for axis in (0, 1):
        if shape[axis] == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Var:
    """Elementwise sum with numpy-style 2-D broadcasting."""
    a, b = as_var(a), as_var(b)
    out = Var(a.value + b.value, parents=(a, b))

    def backward_fn():
        a.grad += _unbroadcast(out.grad, a.value.shape)
        b.grad += _unbroadcast(out.grad, b.value.shape)

    out._backward = backward_fn
    return out


def scale(a, c) -> Var:
    """Multiply by a constant scalar or constant array of matching shape.

    The constant is not differentiated; use this for masks, signs and
    fixed coefficients.
    """
    a = as_var(a)
    c = np.asarray(c, dtype=np.float64)
    if np.broadcast_shapes(a.value.shape, c.shape) != a.value.shape:
        raise ValueError(f"constant of shape {c.shape} would enlarge operand {a.value.shape}")
    out = Var(a.value * c, parents=(a,))

    def backward_fn():
        a.grad += out.grad * c

    out._backward = backward_fn
    return out


def matmul(a, b, ta: bool = False, tb: bool = False) -> Var:
    """Matrix product of (optionally transposed) operands."""
    a, b = as_var(a), as_var(b)
    av = a.value.T if ta else a.value
    bv = b.value.T if tb else b.value
    if av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = Var(av @ bv, parents=(a, b))

    def backward_fn():
        g = out.grad
        da = g @ bv.T
        db = av.T @ g
        a.grad += da.T if ta else da
        b.grad += db.T if tb else db

    out._backward = backward_fn
    return out


def relu(a) -> Var:
    """Elementwise max(x, 0)."""
    a = as_var(a)
    out = Var(np.maximum(a.value, 0.0), parents=(a,))

    def backward_fn():
        a.grad += out.grad * (a.value > 0.0)

    out._backward = backward_fn
    return out


def log(a) -> Var:
    a = as_var(a)
    out = Var(np.log(a.value), parents=(a,))

    def backward_fn():
        a.grad += out.grad / a.value

    out._backward = backward_fn
    return out


def exp(a) -> Var:
    a = as_var(a)
    out = Var(np.exp(a.value), parents=(a,))

    def backward_fn():
        a.grad += out.grad * out.value

    out._backward = backward_fn
    return out


def sumv(a, axis: Optional[int] = None) -> Var:
    """Sum over all entries (axis=None) or one axis; keeps 2-D shape."""
    a = as_var(a)
    out = Var(a.value.sum(axis=axis, keepdims=True), parents=(a,))

    def backward_fn():
        a.grad += np.broadcast_to(out.grad, a.value.shape)

    out._backward = backward_fn
    return out


def row_softmax(a, mask: Optional[np.ndarray] = None) -> Var:
    """Row-wise softmax, optionally restricted to mask > 0 entries.

    Masked-out columns get probability 0; every row must keep at least one
    admitted entry. Stabilized by the row max, which carries no gradient.
    """
    a = as_var(a)
    v = a.value
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != v.shape:
            raise ValueError(f"mask shape {mask.shape} != operand shape {v.shape}")
        included = mask > 0.0
        if not included.any(axis=1).all():
            raise ValueError("row_softmax: a row has no admitted entries")
        vmax = np.where(included, v, -np.inf).max(axis=1, keepdims=True)
        e = np.where(included, np.exp(v - vmax), 0.0)
    else:
        vmax = v.max(axis=1, keepdims=True)
        e = np.exp(v - vmax)
    s = e / e.sum(axis=1, keepdims=True)
    out = Var(s, parents=(a,))

    def backward_fn():
        g = out.grad
        a.grad += s * (g - (g * s).sum(axis=1, keepdims=True))

    out._backward = backward_fn
    return out


def pearson(a, b=None, eps: float = 1e-8) -> Var:
    """Pearson correlation matrix between the rows of [a] or [a; b].

    Rows are mean-centered over their coordinates; denominators are
    floored at eps so constant rows yield ~0 correlations instead of NaN.
    """
    a = as_var(a)
    parts = [a]
    if b is not None:
        parts.append(as_var(b))
        if parts[1].value.shape[1] != a.value.shape[1]:
            raise ValueError("pearson: operands must share the coordinate dimension")
    z = np.concatenate([p.value for p in parts], axis=0)
    c = z - z.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(c, axis=1)
    r = np.maximum(norms, eps)
    p_val = (c @ c.T) / np.outer(r, r)
    out = Var(p_val, parents=tuple(parts))

    def backward_fn():
        g = out.grad
        v = g / np.outer(r, r)
        dc = (v + v.T) @ c
        # row norms enter every entry of their row and column of P
        dr = -((g * p_val).sum(axis=1) + (g * p_val).sum(axis=0)) / r
        active = norms > eps
        coef = np.where(active, dr / np.where(active, norms, 1.0), 0.0)
        dc += coef[:, None] * c
        dz = dc - dc.mean(axis=1, keepdims=True)
        offset = 0
        for p in parts:
            n = p.value.shape[0]
            p.grad += dz[offset : offset + n]
            offset += n

    out._backward = backward_fn
    return out


def backward(root: Var) -> None:
    """Fill adjoints for every node reachable from a scalar root."""
    if root.value.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.value.shape}")
    topo: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    for node in topo:
        node.grad = np.zeros_like(node.value)
    root.grad = np.ones_like(root.value)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
