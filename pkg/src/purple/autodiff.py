"""Reverse-mode automatic differentiation over dense float64 matrices.

Deliberately small: a `Tape` records every op of one forward pass in
topological order, and `Tape.backward` pushes adjoints from a scalar root
back to the leaves.  The op set covers exactly what the propensity scorer
needs: matmul, add (same-shape or 1 x d row-broadcast bias), scale,
transpose, row_softmax, sigmoid, relu, mean_rows, concat_rows/concat_cols,
plus a `custom` hook for externally defined nodes.

Values are 2-D float64 throughout.  Repeated backward calls accumulate into
`Node.grad`; each call runs with its own adjoint buffers so earlier passes
never re-propagate.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operands whose shapes are incompatible for the requested op."""


class Node:
    __slots__ = ("value", "grad", "op", "parents", "_backward", "_index")

    def __init__(self, value: np.ndarray, op: str, parents: tuple["Node", ...], backward, index: int):
        self.value = value
        self.grad: np.ndarray | None = None
        self.op = op
        self.parents = parents
        self._backward = backward  # maps output adjoint -> one adjoint per parent
        self._index = index

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(op={self.op!r}, shape={self.value.shape})"


def _as_matrix(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected a scalar, vector, or matrix; got ndim={arr.ndim}")
    return arr


class Tape:
    """Topologically ordered record of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _record(self, value: np.ndarray, op: str, parents: tuple[Node, ...], backward) -> Node:
        node = Node(value, op, parents, backward, index=len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, value) -> Node:
        return self._record(_as_matrix(value).copy(), "leaf", (), None)

    def custom(self, value, parents: Sequence[Node], backward: Callable, op: str = "custom") -> Node:
        """Externally defined op; `backward(g)` must return one adjoint per parent."""
        return self._record(_as_matrix(value), op, tuple(parents), backward)

    def matmul(self, a: Node, b: Node) -> Node:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeError(f"matmul: inner dims differ, {a.value.shape} vs {b.value.shape}")
        value = a.value @ b.value
        av, bv = a.value, b.value

        def backward(g):
            return g @ bv.T, av.T @ g

        return self._record(value, "matmul", (a, b), backward)

    def add(self, a: Node, b: Node) -> Node:
        sa, sb = a.value.shape, b.value.shape
        if sa == sb:
            def backward(g):
                return g, g
        elif sb == (1, sa[1]):  # row-broadcast bias
            def backward(g):
                return g, g.sum(axis=0, keepdims=True)
        elif sa == (1, sb[1]):
            def backward(g):
                return g.sum(axis=0, keepdims=True), g
        else:
            raise ShapeError(f"add: incompatible shapes {sa} vs {sb}")
        return self._record(a.value + b.value, "add", (a, b), backward)

    def scale(self, a: Node, c: float) -> Node:
        c = float(c)

        def backward(g):
            return (g * c,)

        return self._record(a.value * c, "scale", (a,), backward)

    def transpose(self, a: Node) -> Node:
        def backward(g):
            return (g.T,)

        return self._record(a.value.T.copy(), "transpose", (a,), backward)

    def row_softmax(self, a: Node) -> Node:
        shifted = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=1, keepdims=True)

        def backward(g):
            # Jacobian-vector product per row: dx = y * (g - sum(g * y))
            dot = (g * y).sum(axis=1, keepdims=True)
            return (y * (g - dot),)

        return self._record(y, "row_softmax", (a,), backward)

    def sigmoid(self, a: Node) -> Node:
        # clamped to the open interval: saturated logits would otherwise round
        # to exactly 0/1 and break downstream positivity requirements
        with np.errstate(over="ignore"):
            y = 1.0 / (1.0 + np.exp(-a.value))
        y = np.clip(y, 1e-12, 1.0 - 1e-12)

        def backward(g):
            return (g * y * (1.0 - y),)

        return self._record(y, "sigmoid", (a,), backward)

    def relu(self, a: Node) -> Node:
        mask = a.value > 0

        def backward(g):
            return (g * mask,)

        return self._record(np.where(mask, a.value, 0.0), "relu", (a,), backward)

    def mean_rows(self, a: Node) -> Node:
        rows = a.value.shape[0]
        value = a.value.mean(axis=0, keepdims=True)

        def backward(g):
            return (np.repeat(g / rows, rows, axis=0),)

        return self._record(value, "mean_rows", (a,), backward)

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        parts = tuple(parts)
        width = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != width:
                raise ShapeError(f"concat_rows: widths differ, {p.value.shape} vs ({'*'}, {width})")
        counts = [p.value.shape[0] for p in parts]
        bounds = np.cumsum(counts)[:-1]

        def backward(g):
            return tuple(np.vsplit(g, bounds))

        return self._record(np.vstack([p.value for p in parts]), "concat_rows", parts, backward)

    def concat_cols(self, parts: Sequence[Node]) -> Node:
        parts = tuple(parts)
        height = parts[0].value.shape[0]
        for p in parts:
            if p.value.shape[0] != height:
                raise ShapeError(f"concat_cols: heights differ, {p.value.shape} vs ({height}, {'*'})")
        counts = [p.value.shape[1] for p in parts]
        bounds = np.cumsum(counts)[:-1]

        def backward(g):
            return tuple(np.hsplit(g, bounds))

        return self._record(np.hstack([p.value for p in parts]), "concat_cols", parts, backward)

    def backward(self, root: Node) -> None:
        """Accumulate d(root)/d(node) into `.grad` for every node reachable from root."""
        if root.value.shape != (1, 1):
            raise ShapeError(f"backward root must be scalar (1, 1), got {root.value.shape}")
        adjoint: dict[int, np.ndarray] = {root._index: np.ones((1, 1))}
        for node in reversed(self.nodes[: root._index + 1]):
            g = adjoint.pop(node._index, None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                existing = adjoint.get(parent._index)
                if existing is None:
                    adjoint[parent._index] = np.array(pg, dtype=np.float64, copy=True)
                else:
                    existing += pg

    def zero_grad(self) -> None:
        for node in self.nodes:
            node.grad = None


def finite_diff_check(f, params: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Max relative disagreement between analytic and central-difference gradients.

    `f(params)` must return `(scalar_value, grads)` with one gradient array per
    parameter.  The relative error per coordinate is
    |analytic - central| / max(1, |central|).
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    params = [np.asarray(p, dtype=np.float64) for p in params]
    value, grads = f(params)
    if not np.isfinite(value):
        raise FloatingPointError("objective evaluated non-finite at the base point")
    worst = 0.0
    for pi, p in enumerate(params):
        grad = np.asarray(grads[pi], dtype=np.float64)
        if grad.shape != p.shape:
            raise ShapeError(f"gradient {pi} has shape {grad.shape}, parameter has {p.shape}")
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            plus = [q.copy() for q in params]
            plus[pi].reshape(-1)[j] = orig + h
            minus = [q.copy() for q in params]
            minus[pi].reshape(-1)[j] = orig - h
            f_plus, _ = f(plus)
            f_minus, _ = f(minus)
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError("objective evaluated non-finite during perturbation")
            central = (f_plus - f_minus) / (2.0 * h)
            err = abs(grad.reshape(-1)[j] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
