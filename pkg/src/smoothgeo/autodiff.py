"""Reverse-mode automatic differentiation over dense float64 arrays.

Every backward rule is written in terms of :class:`Tensor` operations, so a
gradient computed with ``create_graph=True`` is itself a graph node and can be
differentiated again (double backprop). With ``create_graph=False`` the same
rules run with recording switched off and return plain constants.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "enable_grad",
    "is_grad_enabled",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "matvec",
    "dot",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "exp",
    "log",
    "sqrt",
    "square",
    "relu",
    "softplus",
    "sigmoid",
    "softmax",
    "logsumexp",
    "log_softmax",
    "cross_entropy",
    "take",
    "smooth_abs",
    "finite_diff_gradient",
    "finite_diff_hessian",
]


class ShapeError(ValueError):
    """Operands of a primitive have incompatible shapes."""

    def __init__(self, op: str, shape_a, shape_b):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: incompatible shapes {self.shape_a} and {self.shape_b}")


_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = is_grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager: operations inside do not record parents."""
    return _grad_mode(False)


def enable_grad():
    return _grad_mode(True)


class Tensor:
    """A node in the computation graph.

    ``op`` is ``"leaf"`` for inputs and constants. ``parents`` holds every
    operand of the producing primitive, constants included.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "_backward", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to the reflected operators

    def __init__(self, value, requires_grad: bool = False):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents: tuple[Tensor, ...] = ()
        self.op = "leaf"
        self.requires_grad = bool(requires_grad)
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    @property
    def is_leaf(self) -> bool:
        return self.op == "leaf"

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def detach(self) -> Tensor:
        return Tensor(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float(self.value)

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value, parents: tuple[Tensor, ...], op: str, backward_fn: Callable) -> Tensor:
    out = Tensor(value)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.parents = parents
        out.op = op
        out.requires_grad = True
        out._backward = backward_fn
    return out


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _sum_to(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(shape) if n == 1 and g.shape[i + lead] != 1
    )
    out = sum(g, axis=axes, keepdims=True) if axes else g
    return reshape(out, shape)


def broadcast_to(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    if a.shape == tuple(shape):
        return a
    src = a.shape
    return _make(
        np.broadcast_to(a.value, shape).copy(),
        (a,),
        "broadcast_to",
        lambda g: (_sum_to(g, src),),
    )


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_sum_to(g, a.shape), _sum_to(neg(g), b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make(
        a.value * b.value,
        (a, b),
        "mul",
        lambda g: (_sum_to(mul(g, b), a.shape), _sum_to(mul(g, a), b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)

    def _bw(g):
        ga = div(g, b)
        gb = neg(div(mul(g, a), mul(b, b)))
        return _sum_to(ga, a.shape), _sum_to(gb, b.shape)

    return _make(a.value / b.value, (a, b), "div", _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.value, (a,), "neg", lambda g: (neg(g),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    holder = []

    out = _make(np.exp(a.value), (a,), "exp", lambda g: (mul(g, holder[0]),))
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.value), (a,), "log", lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    holder = []
    out = _make(np.sqrt(a.value), (a,), "sqrt", lambda g: (div(mul(g, 0.5), holder[0]),))
    holder.append(out)
    return out


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.value * a.value, (a,), "square", lambda g: (mul(g, mul(a, 2.0)),))


def smooth_abs(a, eps: float = 1e-12) -> Tensor:
    """Differentiable |a| as sqrt(a^2 + eps)."""
    return sqrt(add(square(a), eps))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # derivative at exactly 0 is 0
    mask = (a.value > 0).astype(np.float64)
    return _make(a.value * mask, (a,), "relu", lambda g: (mul(g, mask),))


def sigmoid(a, beta: float = 1.0) -> Tensor:
    """Logistic function of ``beta * a``; the derivative of softplus."""
    a = as_tensor(a)
    z = beta * a.value
    value = np.empty_like(z)
    pos = z >= 0
    value[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    value[~pos] = ez / (1.0 + ez)
    holder = []

    def _bw(g):
        s = holder[0]
        return (mul(g, mul(mul(s, sub(1.0, s)), beta)),)

    out = _make(value, (a,), "sigmoid", _bw)
    holder.append(out)
    return out


def softplus(a, beta: float = 1.0) -> Tensor:
    """beta^-1 * log(1 + exp(beta * a)) in the overflow-safe form."""
    if not beta > 0:
        raise ValueError(f"softplus: beta must be positive, got {beta}")
    a = as_tensor(a)
    v = a.value
    value = np.maximum(v, 0.0) + np.log1p(np.exp(-beta * np.abs(v))) / beta
    return _make(value, (a,), "softplus", lambda g: (mul(g, sigmoid(a, beta)),))


# ---------------------------------------------------------------- shape ops


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _make(a.value.reshape(shape), (a,), "reshape", lambda g: (reshape(g, src),))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, ())
    return _make(a.value.T.copy(), (a,), "transpose", lambda g: (transpose(g),))


def _scatter(g, index, shape) -> Tensor:
    g = as_tensor(g)
    value = np.zeros(shape)
    np.add.at(value, index, g.value)
    return _make(value, (g,), "scatter", lambda gg: (take(gg, index),))


def take(a, index) -> Tensor:
    """Numpy-style indexing; the backward pass scatters into zeros."""
    a = as_tensor(a)
    src = a.shape
    return _make(
        np.array(a.value[index], dtype=np.float64),
        (a,),
        "take",
        lambda g: (_scatter(g, index, src),),
    )


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = as_tensor(a)
    src = a.shape

    def _bw(g):
        if axis is None:
            kshape = (1,) * len(src)
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            axes = tuple(ax % len(src) for ax in axes)
            kshape = tuple(1 if i in axes else n for i, n in enumerate(src))
        return (broadcast_to(reshape(g, kshape), src),)

    return _make(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", _bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(n))


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product for operands of rank 1 or 2 (matvec and dot included)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def _bw(g):
        if a.ndim == 2 and b.ndim == 2:
            return matmul(g, transpose(b)), matmul(transpose(a), g)
        if a.ndim == 2 and b.ndim == 1:
            return _outer(g, b), matmul(g, a)
        if a.ndim == 1 and b.ndim == 2:
            return matmul(b, g), _outer(a, g)
        return mul(g, b), mul(g, a)

    return _make(a.value @ b.value, (a, b), "matmul", _bw)


def _outer(u: Tensor, v: Tensor) -> Tensor:
    return mul(reshape(u, (u.shape[0], 1)), reshape(v, (1, v.shape[0])))


def matvec(m, x) -> Tensor:
    m, x = as_tensor(m), as_tensor(x)
    if m.ndim != 2 or x.ndim != 1:
        raise ShapeError("matvec", m.shape, x.shape)
    return matmul(m, x)


def dot(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    return matmul(a, b)


# ---------------------------------------------------------------- softmax family


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    holder = []

    def _bw(g):
        s = holder[0]
        inner = sum(mul(g, s), axis=axis, keepdims=True)
        return (mul(s, sub(g, inner)),)

    out = _make(e / e.sum(axis=axis, keepdims=True), (a,), "softmax", _bw)
    holder.append(out)
    return out


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.value.max(axis=axis, keepdims=True)
    value = m + np.log(np.exp(a.value - m).sum(axis=axis, keepdims=True))
    if not keepdims:
        value = np.squeeze(value, axis=axis)
    src = a.shape

    def _bw(g):
        if not keepdims:
            kshape = list(src)
            kshape[axis] = 1
            g = reshape(g, tuple(kshape))
        return (mul(broadcast_to(g, src), softmax(a, axis=axis)),)

    return _make(value, (a,), "logsumexp", _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def cross_entropy(logits, y) -> Tensor:
    """-log softmax(logits)[y]; batched logits give the mean over rows."""
    logits = as_tensor(logits)
    logp = log_softmax(logits, axis=-1)
    if logits.ndim == 1:
        y = int(y)
        if not 0 <= y < logits.shape[0]:
            raise ShapeError("cross_entropy", logits.shape, (y,))
        return neg(take(logp, y))
    y = np.asarray(y, dtype=np.int64)
    if y.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, y.shape)
    picked = take(logp, (np.arange(len(y)), y))
    return neg(mean(picked))


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each node in ``wrt``.

    Nodes not reachable from ``root`` get a zero gradient. With
    ``create_graph`` the returned gradients are differentiable graph nodes.
    """
    if root.size != 1:
        raise ValueError(f"backward: root must be scalar, got shape {root.shape}")
    grads: dict[int, Tensor] = {}
    if root.requires_grad:
        order = _topological_order(root)
        grads[id(root)] = Tensor(np.ones(root.shape))
        with _grad_mode(create_graph):
            for node in reversed(order):
                g = grads.get(id(node))
                if g is None or node._backward is None:
                    continue
                for parent, pg in zip(node.parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    prev = grads.get(id(parent))
                    grads[id(parent)] = pg if prev is None else add(prev, pg)
    out = []
    for w in wrt:
        g = grads.get(id(w))
        if g is None:
            g = Tensor(np.zeros(w.shape))
        elif not create_graph:
            g = g.detach()
        out.append(g)
    return out


# ---------------------------------------------------------------- oracles


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Central differences (fn(x+h e_i) - fn(x-h e_i)) / 2h per coordinate."""
    if not h > 0:
        raise ValueError("finite_diff_gradient: h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(x.shape)


def finite_diff_hessian(fn: Callable[[np.ndarray], float], x, h: float = 1e-3) -> np.ndarray:
    """Four-point second-difference stencil, symmetrized as (H + H^T)/2."""
    if not h > 0:
        raise ValueError("finite_diff_hessian: h must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    d = x.size
    H = np.zeros((d, d))

    def f_at(i, si, j, sj):
        xp = x.copy()
        xp[i] += si * h
        xp[j] += sj * h
        return float(fn(xp))

    for i in range(d):
        for j in range(i, d):
            H[i, j] = (
                f_at(i, 1, j, 1) - f_at(i, 1, j, -1) - f_at(i, -1, j, 1) + f_at(i, -1, j, -1)
            ) / (4 * h * h)
            H[j, i] = H[i, j]
    return 0.5 * (H + H.T)
