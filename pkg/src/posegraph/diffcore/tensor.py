"""Array-valued reverse-mode automatic differentiation.

Each operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar walks the graph in reverse topological
order and accumulates ``.grad`` on every tracked leaf.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .. import kernels


class DiffError(RuntimeError):
    pass


class ShapeMismatch(DiffError, ValueError):
    pass


class BackwardTwice(DiffError):
    """``backward`` called again on a graph that was already consumed."""


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.value) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._consumed = False
        self.name = name

    @classmethod
    def from_op(cls, value, parents: Sequence["Tensor"], backward: Callable) -> "Tensor":
        """Wrap an op result. ``backward(g)`` returns one gradient (or None) per parent."""
        out = cls(value)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.value)

    def backward(self) -> None:
        if self.value.size != 1:
            raise ShapeMismatch(f"backward needs a scalar, got shape {self.shape}")
        if self._consumed:
            raise BackwardTwice("graph already consumed; rebuild the forward pass first")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
            node._consumed = True
        self._consumed = True

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(as_tensor(other), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return Tensor.from_op(value, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return Tensor.from_op(
        value,
        (a, b),
        lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    return Tensor.from_op(a.value @ b.value, (a, b), lambda g: (g @ b.value.T, a.value.T @ g))


SPARSE_DENSITY = 0.25


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` for x (batch, in), weight (out, in).

    Constant, mostly-zero inputs go through a CSR product; the result is the
    same product with a different summation order.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.value.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeMismatch(f"input {x.shape} does not fit weight {weight.shape}")
    xv = x.value
    if not x.requires_grad and xv.size > 4096 and np.count_nonzero(xv) < SPARSE_DENSITY * xv.size:
        xs = sp.csr_matrix(xv)
        value = np.asarray(xs @ weight.value.T)
        grad_w = lambda g: np.asarray((xs.T @ g).T)  # noqa: E731
    else:
        value = xv @ weight.value.T
        grad_w = lambda g: g.T @ xv  # noqa: E731
    if bias is None:
        return Tensor.from_op(value, (x, weight), lambda g: (g @ weight.value, grad_w(g)))
    bias = as_tensor(bias)
    value = value + bias.value
    return Tensor.from_op(value, (x, weight, bias), lambda g: (g @ weight.value, grad_w(g), g.sum(axis=0)))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor.from_op(x.value.reshape(shape), (x,), lambda g: (g.reshape(old),))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    value = x.value.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor.from_op(value, (x,), back)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    scale = np.where(x.value > 0, 1.0, slope)
    return Tensor.from_op(x.value * scale, (x,), lambda g: (g * scale,))


SIGMOID_CLIP = 30.0


def sigmoid(x) -> Tensor:
    """Logistic function; logits are clipped to +-30 so outputs stay in (0, 1)."""
    x = as_tensor(x)
    z = np.clip(x.value, -SIGMOID_CLIP, SIGMOID_CLIP)
    y = 1.0 / (1.0 + np.exp(-z))
    inside = (np.abs(x.value) < SIGMOID_CLIP).astype(np.float64)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y) * inside,))


def binary_cross_entropy(prob, target, weight=None, eps: float = 1e-12) -> Tensor:
    """Mean BCE over entries with non-zero ``weight`` (all entries if None)."""
    prob = as_tensor(prob)
    t = np.asarray(target, dtype=np.float64)
    w = np.ones_like(t) if weight is None else np.asarray(weight, dtype=np.float64)
    if t.shape != prob.shape or w.shape != prob.shape:
        raise ShapeMismatch(f"bce shapes {prob.shape}, {t.shape}, {w.shape}")
    denom = w.sum()
    if denom <= 0:
        raise ShapeMismatch("bce needs at least one weighted entry")
    p = np.clip(prob.value, eps, 1.0 - eps)
    loss = -(w * (t * np.log(p) + (1.0 - t) * np.log(1.0 - p))).sum() / denom
    inside = ((prob.value > eps) & (prob.value < 1.0 - eps)).astype(np.float64)

    def back(g):
        return (g * w * (p - t) / (p * (1.0 - p)) * inside / denom,)

    return Tensor.from_op(np.asarray(loss), (prob,), back)


def gather(x, index) -> Tensor:
    """Rows ``x[index]`` along axis 0."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return Tensor.from_op(x.value[idx], (x,), lambda g: (kernels.scatter_add(g, idx, n),))


def scatter_add(x, index, n: int) -> Tensor:
    """``out[index[e]] += x[e]``; output has ``n`` rows."""
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != x.shape[0]:
        raise ShapeMismatch(f"index length {idx.shape[0]} vs rows {x.shape[0]}")
    return Tensor.from_op(kernels.scatter_add(x.value, idx, n), (x,), lambda g: (g[idx],))


def segment_softmax(x, segment, n: int) -> Tensor:
    """Softmax over rows of ``x`` (E, H) sharing the same ``segment`` id."""
    x = as_tensor(x)
    seg = np.asarray(segment, dtype=np.int64)
    alpha = kernels.segment_softmax(x.value, seg, n)
    return Tensor.from_op(alpha, (x,), lambda g: (kernels.segment_softmax_grad(alpha, g, seg, n),))


def take(x, key) -> Tensor:
    """Basic or fancy indexing ``x[key]``."""
    x = as_tensor(x)

    def back(g):
        full = np.zeros_like(x.value)
        np.add.at(full, key, g)
        return (full,)

    return Tensor.from_op(x.value[key], (x,), back)


def attend(values, alpha, src, dst, n: int) -> Tensor:
    """Attention-weighted message sum.

    ``out[i, h] = sum_e alpha[e, h] * values[src[e], h]`` over edges with
    ``dst[e] == i``; values (N, H, F), alpha (E, H).
    """
    values, alpha = as_tensor(values), as_tensor(alpha)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    if values.value.ndim != 3 or alpha.shape != (src.shape[0], values.shape[1]):
        raise ShapeMismatch(f"attend values {values.shape} alpha {alpha.shape} edges {src.shape}")
    out = kernels.gat_aggregate(values.value, alpha.value, src, dst, n)
    return Tensor.from_op(
        out, (values, alpha), lambda g: kernels.gat_aggregate_grad(g, values.value, alpha.value, src, dst)
    )


def detach(x) -> Tensor:
    return Tensor(as_tensor(x).value.copy())
