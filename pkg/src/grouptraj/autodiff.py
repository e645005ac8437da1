"""Dense float64 tensors with a dynamic reverse-mode tape.

Every operation on a :class:`Tensor` that has at least one input requiring
gradients records its inputs and a backward rule.  Calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and *adds* the result into ``.grad`` of every tensor that
requires gradients, so two backward calls without :func:`zero_grads` in
between accumulate.

Broadcasting is deliberately limited to adding a row-vector bias to a matrix
and to Python scalars; every other shape combination must match exactly.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "concat",
    "stack",
    "no_grad",
    "zero_grads",
    "grad_check",
    "check_gradients",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up where finite values are required."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _recording()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        if _recording() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    # ------------------------------------------------------------------ basics

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # ------------------------------------------------------------- arithmetic

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._result(self.data + c, (self,), lambda g: (g,), "add_scalar")
        a, b = self, other
        if a.shape == b.shape:
            return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")
        if a.ndim == 1 and b.ndim == 2:
            a, b = b, a
        if a.ndim == 2 and b.shape in ((a.shape[1],), (1, a.shape[1])):
            bshape = b.shape
            return Tensor._result(
                a.data + b.data.reshape(1, -1),
                (a, b),
                lambda g: (g, g.sum(axis=0).reshape(bshape)),
                "add_bias",
            )
        raise ShapeError(f"add: shapes {self.shape} and {other.shape} do not conform")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        return self + (-other)

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            c = float(other)
            return Tensor._result(self.data * c, (self,), lambda g: (g * c,), "mul_scalar")
        if self.shape != other.shape:
            raise ShapeError(f"mul: shapes {self.shape} and {other.shape} differ")
        a, b = self.data, other.data
        return Tensor._result(a * b, (self, other), lambda g: (g * b, g * a), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.reciprocal()
        return self * (1.0 / float(other))

    def reciprocal(self) -> "Tensor":
        out = 1.0 / self.data
        return Tensor._result(out, (self,), lambda g: (-g * out * out,), "reciprocal")

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim != 2 or other.ndim != 2 or self.shape[1] != other.shape[0]:
            raise ShapeError(f"matmul: shapes {self.shape} and {other.shape} do not conform")
        a, b = self.data, other.data
        return Tensor._result(a @ b, (self, other), lambda g: (g @ b.T, a.T @ g), "matmul")

    def matmul(self, other: "Tensor") -> "Tensor":
        return self @ other

    # ------------------------------------------------------------ elementwise

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._result(np.where(mask, self.data, 0.0), (self,), lambda g: (g * mask,), "relu")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self) -> "Tensor":
        # tanh form never overflows
        out = 0.5 * (1.0 + np.tanh(0.5 * self.data))
        return Tensor._result(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,), "log")

    def abs(self) -> "Tensor":
        sign = np.sign(self.data)
        return Tensor._result(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    __abs__ = abs

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._result(x * x, (self,), lambda g: (2.0 * g * x,), "square")

    # ------------------------------------------------------------- reductions

    def sum(self, axis: int | None = None) -> "Tensor":
        shape = self.shape
        if axis is None:
            return Tensor._result(
                np.asarray(self.data.sum()), (self,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum"
            )
        axis = axis % self.ndim

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis), (self,), back, "sum_axis")

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis) * (1.0 / n)

    # ---------------------------------------------------------------- reshape

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view {old} as {shape}") from exc
        return Tensor._result(out, (self,), lambda g: (g.reshape(old),), "reshape")

    @property
    def T(self) -> "Tensor":
        if self.ndim != 2:
            raise ShapeError(f"transpose needs a matrix, got shape {self.shape}")
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")

    def __getitem__(self, idx) -> "Tensor":
        if isinstance(idx, Tensor):
            raise TypeError("index with integers, slices or integer arrays, not Tensors")
        shape = self.shape
        out = self.data[idx]

        parts = idx if isinstance(idx, tuple) else (idx,)
        basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

        def back(g):
            full = np.zeros(shape)
            if basic:
                full[idx] = g
            else:
                np.add.at(full, idx, g)
            return (full,)

        return Tensor._result(np.array(out, dtype=np.float64), (self,), back, "getitem")

    # --------------------------------------------------------------- backward

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones(self.shape)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                # leaves keep a private buffer; intermediate grads are never mutated in place
                node.grad = g.copy() if node._backward is None else g
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topological(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (the feature axis by default)."""
    tensors = [_as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis):
            raise ShapeError(f"concat: shapes {[t.shape for t in tensors]} differ off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {[t.shape for t in tensors]} differ")
    axis = axis % (len(shape) + 1)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, back, "stack")


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


def _scalar(value: Tensor) -> float:
    return float(np.asarray(value.data).reshape(()))


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Compare the tape gradient of scalar ``f`` at ``x`` with central differences.

    Returns max over coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    return _check(lambda: f(x), [x], h, None)[0]


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    h: float = 1e-5,
    coords: Sequence[np.ndarray] | None = None,
) -> list[float]:
    """Finite-difference check of ``loss_fn`` w.r.t. several tensors at once.

    ``coords`` optionally restricts each tensor to a subset of flat indices.
    Returns one max relative error per tensor.
    """
    return _check(loss_fn, list(tensors), h, coords)


def _check(loss_fn, tensors, h, coords) -> list[float]:
    saved = [t.grad for t in tensors]
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    if loss.size != 1:
        raise ShapeError(f"gradient check needs a scalar function, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss value is not finite at the base point")
    loss.backward()
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in tensors]
    for t, g in zip(tensors, saved):
        t.grad = g

    errors = []
    with no_grad():
        for k, t in enumerate(tensors):
            flat = t.data.reshape(-1)
            ana = analytic[k].reshape(-1)
            idx = range(flat.size) if coords is None else coords[k]
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                fp = _scalar(loss_fn())
                flat[i] = orig - h
                fm = _scalar(loss_fn())
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                if not (np.isfinite(num) and np.isfinite(ana[i])):
                    raise NonFiniteError(f"non-finite gradient at tensor {k}, coordinate {np.unravel_index(i, t.shape)}")
                worst = max(worst, abs(ana[i] - num) / max(1.0, abs(ana[i])))
            errors.append(worst)
    return errors
