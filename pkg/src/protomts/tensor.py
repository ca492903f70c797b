"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent. Calling
:meth:`Tensor.backward` on a scalar orders the graph topologically and replays
those closures in reverse, summing contributions for tensors with several
consumers.

Leaf tensors accumulate into ``grad`` across backward calls until
:meth:`Tensor.zero_grad` is called; intermediate tensors have their ``grad``
overwritten on each pass.

Broadcasting is deliberately limited to scalar-with-tensor. The one row-wise
operation needed by dense layers is the explicit :func:`add_rowwise`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

Array = np.ndarray
BackwardFn = Callable[[Array], Sequence["Array | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self.op = "leaf"

    @classmethod
    def _make(cls, data: Array, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out.op = op
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> Array:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> Array:
        return self.data.copy()

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self):
        return self.data.shape[0]

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # -- autodiff ------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("backward() root does not depend on any requires_grad tensor")
        order = _topological_order(self)
        grads: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = node.grad + g if node.grad is not None else g.copy()
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operator sugar ------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self):
        return total(self)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topological_order(root: Tensor) -> list[Tensor]:
    # Iterative DFS post-order: parents appear before every consumer.
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(t: Tensor) -> bool:
    return t.data.ndim == 0


def _binary_shapes(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise DimensionError(f"{name}: shapes {a.shape} and {b.shape} differ")


def _reduce_to(g: Array, t: Tensor) -> Array:
    # Undo the scalar-with-tensor broadcast.
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# -- elementwise ---------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "add")
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "sub")
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_reduce_to(g, a), _reduce_to(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "mul")
    return Tensor._make(
        a.data * b.data,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b, "div")
    out = a.data / b.data
    return Tensor._make(
        out,
        (a, b),
        lambda g: (_reduce_to(g / b.data, a), _reduce_to(-g * out / b.data, b)),
        "div",
    )


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid(x: Array) -> Array:
    # tanh form: overflow-free for any finite input.
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    return Tensor._make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
    return Tensor._make(out, (a,), lambda g: (g * local,), "sqrt")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def reciprocal(a: Tensor) -> Tensor:
    out = 1.0 / a.data
    return Tensor._make(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def clamp_max(a: Tensor, limit: float) -> Tensor:
    """min(a, limit) elementwise; the gradient is zero where the cap is active."""
    mask = a.data <= limit
    return Tensor._make(np.where(mask, a.data, limit), (a,), lambda g: (g * mask,), "clamp_max")


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "relu": relu, "square": square, "sqrt": sqrt}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul (binary) or tanh, sigmoid, relu, square, sqrt."""
    if op in _BINARY:
        if b is None:
            raise ContractError(f"{op} needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ContractError(f"{op} takes one operand")
        return _UNARY[op](_as_tensor(a))
    raise ValueError(f"unknown elementwise op {op!r}")


# -- structural ----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    return Tensor._make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None, a.data.T @ g if b.requires_grad else None),
        "matmul",
    )


def add_rowwise(x: Tensor, row: Tensor) -> Tensor:
    """x[i, :] + row for every i (dense-layer bias)."""
    if x.data.ndim != 2 or row.shape != (x.shape[1],):
        raise DimensionError(f"add_rowwise: shapes {x.shape} and {row.shape} are not compatible")
    return Tensor._make(x.data + row.data, (x, row), lambda g: (g, g.sum(axis=0)), "add_rowwise")


def total(a: Tensor) -> Tensor:
    return Tensor._make(np.asarray(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return Tensor._make(np.asarray(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """numpy-style indexing; repeated fancy indices scatter-add on the way back."""
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._make(np.array(out, dtype=np.float64), (a,), backward, "take")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat of an empty list")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} disagree off axis {axis}")
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=axis)),
        "concat",
    )


def min_along(a: Tensor, axis: int) -> Tensor:
    """Minimum along one axis of a 2-D tensor.

    The gradient flows only to the achieving element; ties go to the lowest index.
    """
    if a.data.ndim != 2:
        raise DimensionError(f"min_along expects a matrix, got shape {a.shape}")
    idx = np.argmin(a.data, axis=axis)
    if axis == 0:
        pick = (idx, np.arange(a.shape[1]))
    else:
        pick = (np.arange(a.shape[0]), idx)
    return take(a, pick)


# -- distances -----------------------------------------------------------
def euclidean_distance(a: Tensor, b: Tensor) -> Tensor:
    """||a - b||_2 for two vectors; the gradient at a == b is taken as zero."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"euclidean_distance: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    dist = float(np.sqrt(diff @ diff))
    unit = diff / dist if dist > 0 else np.zeros_like(diff)
    return Tensor._make(np.asarray(dist), (a, b), lambda g: (g * unit, -g * unit), "euclidean_distance")


def pairwise_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distances between rows: out[i, j] = ||a[i] - b[j]||_2.

    Coincident rows get a zero subgradient, as in :func:`euclidean_distance`.
    """
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise DimensionError(f"pairwise_distance: shapes {a.shape} and {b.shape} are not compatible")
    diff = a.data[:, None, :] - b.data[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            w = np.where(dist > 0, g / np.where(dist > 0, dist, 1.0), 0.0)
        wd = w[:, :, None] * diff
        ga = wd.sum(axis=1) if a.requires_grad else None
        gb = -wd.sum(axis=0) if b.requires_grad else None
        return ga, gb

    return Tensor._make(dist, (a, b), backward, "pairwise_distance")


# -- losses --------------------------------------------------------------
def softmax(logits: Array) -> Array:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_class = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_class):
        raise IndexError(f"labels must lie in [0, {n_class})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = float(np.mean(logsum - z[rows, labels]))

    def backward(g):
        p = softmax(logits.data)
        p[rows, labels] -= 1.0
        return (p * (float(g) / labels.size),)

    return Tensor._make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


# -- optimizer -----------------------------------------------------------
@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)


class Adam:
    """Adaptive moment estimation with bias correction."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ContractError("Adam was given a parameter that does not require grad")
        self.state = OptimizerState(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            first_moment=[np.zeros_like(p.data) for p in self.params],
            second_moment=[np.zeros_like(p.data) for p in self.params],
        )

    def step(self) -> None:
        optimizer_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


def optimizer_step(params: Sequence[Tensor], state: OptimizerState) -> None:
    """Apply one Adam update in place, then zero the gradients."""
    for p in params:
        if p.grad is None:
            raise ContractError("optimizer_step: parameter has no gradient")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(p.data) for p in params]
        state.second_moment = [np.zeros_like(p.data) for p in params]
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.grad = np.zeros_like(p.data)
