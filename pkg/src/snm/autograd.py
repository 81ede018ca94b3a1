"""Minimal reverse-mode differentiation over dense float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its parents and a
closure mapping the upstream gradient to one gradient per parent.
:func:`backward` walks the recorded graph in reverse topological order and
accumulates into :class:`Parameter` leaves.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp


class NonFiniteError(FloatingPointError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    """A node of the computation record.

    ``backward`` receives the gradient w.r.t. this node's value and returns a
    sequence with one entry per parent (``None`` for parents that do not need
    a gradient).
    """

    __slots__ = ("value", "parents", "op", "backward_fn", "requires_grad")

    def __init__(self, value, parents: Sequence["Tensor"] = (), backward=None, op: str = "const"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward
        self.requires_grad = any(p.requires_grad for p in self.parents)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape})"

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
        return affine(self, -1.0, 0.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Named leaf with a persistent gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, name: str, value):
        super().__init__(np.array(value, dtype=np.float64), op="param")
        self.name = name
        self.requires_grad = True
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Wrap ``x`` as a gradient-free leaf (stop-gradient for arrays)."""
    if isinstance(x, Tensor):
        return Tensor(x.value.copy())
    return Tensor(x)


def _finite(value: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(value).all():
        raise NonFiniteError(f"non-finite output from {op}")
    return value


def _node(value, parents, backward, op, preserves_finite=False) -> Tensor:
    value = np.asarray(value, dtype=np.float64)
    # ops that map finite inputs to finite outputs skip the scan once every
    # input is itself a checked op output; leaves are never trusted
    if not (preserves_finite and all(p.parents for p in parents)):
        _finite(value, op)
    return Tensor(value, parents, backward, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value + b.value, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _node(a.value - b.value, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def backward(g):
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _node(a.value * b.value, (a, b), backward, "mul")


def affine(x, scale: float, shift: float = 0.0) -> Tensor:
    """``scale * x + shift`` for python scalars."""
    x = as_tensor(x)
    return _node(scale * x.value + shift, (x,), lambda g: (g * scale,), "affine")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _node(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh", preserves_finite=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # stable for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.value)
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid", preserves_finite=True)


def log_sigmoid(x) -> Tensor:
    """``log(sigmoid(x))`` without the underflow of composing the two."""
    x = as_tensor(x)
    z = x.value
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))
    return _node(out, (x,), lambda g: (g * _sigmoid(-z),), "log_sigmoid", preserves_finite=True)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.value > 0
    return _node(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,), "relu", preserves_finite=True)


def log(x) -> Tensor:
    x = as_tensor(x)
    if (x.value <= 0).any():
        raise NonFiniteError("log of non-positive value")
    return _node(np.log(x.value), (x,), lambda g: (g / x.value,), "log")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.value >= lo) & (x.value <= hi)
    return _node(np.clip(x.value, lo, hi), (x,), lambda g: (g * inside,), "clip", preserves_finite=True)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``a`` is ``(..., n)`` and ``b`` is ``(n, m)`` or ``(n,)``.

    Row vectors of ``a`` are mapped through ``b``, i.e. each row x yields
    ``b.T x`` -- the ``W^T x`` convention of the model equations.
    """
    a, b = as_tensor(a), as_tensor(b)
    if b.value.ndim not in (1, 2) or a.value.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    n = b.shape[0]
    out = np.matmul(a.value, b.value)

    def backward(g):
        ga = gb = None
        if b.value.ndim == 1:
            if a.requires_grad:
                ga = g[..., None] * b.value
            if b.requires_grad:
                gb = a.value.reshape(-1, n).T @ g.reshape(-1)
        else:
            if a.requires_grad:
                ga = g @ b.value.T
            if b.requires_grad:
                gb = a.value.reshape(-1, n).T @ g.reshape(-1, b.shape[1])
        return ga, gb

    return _node(out, (a, b), backward, "matmul")


def dot(a, b) -> Tensor:
    """Inner product over the last axis, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "dot")
    out = (a.value * b.value).sum(axis=-1)

    def backward(g):
        g = g[..., None]
        return (
            _unbroadcast(g * b.value, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), backward, "dot")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.value for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, ts))

    return _node(out, ts, backward, "concat", preserves_finite=True)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {exc}") from None
    return _node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape", preserves_finite=True)


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    out = x.value.sum(axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), backward, "sum")


class RowGrad:
    """Gradient of a row gather, nonzero only on the gathered rows.

    Kept as (row index, per-row values) so a table parameter receives a
    scatter-add over the touched rows instead of a dense temporary.
    """

    __slots__ = ("index", "values")

    def __init__(self, index: np.ndarray, values: np.ndarray):
        self.index = index
        self.values = values

    def merge(self, other: "RowGrad") -> "RowGrad":
        return RowGrad(np.concatenate([self.index, other.index]), np.concatenate([self.values, other.values]))

    def reduced(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique rows and their summed values."""
        rows, inv = np.unique(self.index, return_inverse=True)
        if self.values.ndim == 1:
            return rows, np.bincount(inv, weights=self.values, minlength=rows.size)
        # sparse matmul beats np.add.at by a wide margin here
        scatter = sp.csr_matrix((np.ones(inv.size), (inv, np.arange(inv.size))), shape=(rows.size, inv.size))
        return rows, np.asarray(scatter @ self.values)

    def add_to(self, out: np.ndarray) -> None:
        rows, vals = self.reduced()
        out[rows] += vals

    def dense(self, shape: tuple) -> np.ndarray:
        out = np.zeros(shape)
        self.add_to(out)
        return out


def take(x, index) -> Tensor:
    """Row gather ``x[index]``; backward is a scatter-add over the gathered rows."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    out = x.value[index]
    width = x.shape[1:]

    def backward(g):
        if not x.requires_grad:
            return (None,)
        return (RowGrad(index.reshape(-1), g.reshape((index.size,) + width)),)

    return _node(out, (x,), backward, "take", preserves_finite=True)


# ---------------------------------------------------------------- masked reductions


def masked_softmax(x, mask, axis: int = -1) -> Tensor:
    """Softmax restricted to entries where ``mask`` is true; others are exactly 0.

    The running maximum is taken over unmasked entries only. A slice with no
    unmasked entry is an error: callers must branch on the empty case first.
    """
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs input {x.shape}")
    if not mask.any(axis=axis).all():
        raise ValueError("masked_softmax: fully masked slice")
    shifted = np.where(mask, x.value, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.where(mask, np.exp(shifted), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (x,), backward, "masked_softmax", preserves_finite=True)


def masked_mean(x, mask, axis: int = -1, fill: float = 0.0) -> Tensor:
    """Mean over entries where ``mask`` is true; empty slices yield ``fill``."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"masked_mean: mask {mask.shape} vs input {x.shape}")
    count = mask.sum(axis=axis)
    safe = np.maximum(count, 1)
    out = np.where(count > 0, np.where(mask, x.value, 0.0).sum(axis=axis) / safe, fill)

    def backward(g):
        w = np.where(count > 0, g / safe, 0.0)
        return (np.expand_dims(w, axis) * mask,)

    return _node(out, (x,), backward, "masked_mean")


# ---------------------------------------------------------------- backward pass


def record(root: Tensor) -> list[Tensor]:
    """Topologically ordered nodes reachable from ``root`` (inputs first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable :class:`Parameter`."""
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray | RowGrad] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(record(loss)):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if isinstance(node, Parameter):
            if isinstance(g, RowGrad):
                g.add_to(node.grad)
            else:
                node.grad += g
            continue
        if isinstance(g, RowGrad):
            g = g.dense(node.shape)
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = _accumulate(grads[id(parent)], pg)
            else:
                grads[id(parent)] = pg


def _accumulate(a, b):
    if isinstance(a, RowGrad) and isinstance(b, RowGrad):
        return a.merge(b)
    if isinstance(a, RowGrad):
        a, b = b, a
    if isinstance(b, RowGrad):
        out = np.array(a, dtype=np.float64)
        b.add_to(out)
        return out
    return a + b


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    checked: int = 0
    max_rel_err: float = 0.0
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def relative_error(a: float, n: float, floor: float = 1e-6) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check(
    closure: Callable[[], Tensor],
    params: Iterable[Parameter],
    h: float = 1e-3,
    tol: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central differences.

    ``closure`` must rebuild the loss from the current parameter values. With
    ``max_entries`` set, larger tensors are checked on a seeded sample of that
    many entries (at least 200).
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(closure())
    analytic = {p.name: p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)
    report = GradCheckReport()

    for p in params:
        flat = p.value.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max(max_entries, 200):
            entries = np.sort(rng.choice(flat.size, max(max_entries, 200), replace=False))
        a_flat = analytic[p.name].reshape(-1)
        for i in entries:
            orig = flat[i]
            flat[i] = orig + h
            up = float(closure().value)
            flat[i] = orig - h
            down = float(closure().value)
            flat[i] = orig
            num = (up - down) / (2 * h)
            err = relative_error(a_flat[i], num, floor)
            report.checked += 1
            report.max_rel_err = max(report.max_rel_err, err)
            if err >= tol:
                idx = np.unravel_index(i, p.shape)
                report.violations.append((p.name, idx, float(a_flat[i]), num, err))
    return report
