"""Dense float64 tensors with a small reverse-mode differentiation tape.

Every operation between tensors records a node holding its parents and a
vector-Jacobian closure.  :func:`backward` orders the nodes reachable from a
scalar root by creation order and replays them in reverse, so gradient
accumulation order is fixed and results are bitwise reproducible.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DegenerateVectorError",
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "concat",
    "constant",
    "cosine_matrix",
    "cosine_sim",
    "dot",
    "finite_diff_check",
    "finite_diff_errors",
    "log_softmax",
    "log_sum_exp",
    "logaddexp",
    "matmul",
    "normalize_rows",
    "stack",
]


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf from finite inputs."""


class DimensionError(ValueError):
    pass


class DegenerateVectorError(ValueError):
    """A zero-norm vector reached a cosine similarity."""


_ids = itertools.count()


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite value produced by {op}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


class Tensor:
    """Row-major float64 array, optionally tracked for differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_vjp", "_id")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._vjp = None
        self._id = next(_ids)

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp, op: str) -> "Tensor":
        data = np.asarray(data, dtype=np.float64)
        _check_finite(data, op)
        data.flags.writeable = False
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        out._id = next(_ids)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
        else:
            out._parents = ()
            out._vjp = None
        return out

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.op = "leaf"
        out._parents = ()
        out._vjp = None
        out._id = next(_ids)
        return out

    # -- elementwise arithmetic -----------------------------------------
    def __add__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor._result(
            self.data + other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
            "add",
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        sa, sb = self.shape, other.shape
        return Tensor._result(
            self.data - other.data,
            (self, other),
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
            "sub",
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._result(
            a * b,
            (self, other),
            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        out = a / b
        return Tensor._result(
            out,
            (self, other),
            lambda g: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def __getitem__(self, key):
        shape = self.shape

        def vjp(g):
            full = np.zeros(shape)
            np.add.at(full, key, g)
            return (full,)

        return Tensor._result(self.data[key], (self,), vjp, "index")

    # -- unary ops ------------------------------------------------------
    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        if (x <= 0).any():
            raise NonFiniteError("log of a non-positive value")
        return Tensor._result(np.log(x), (self,), lambda g: (g / x,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    # -- reductions and reshaping --------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,), vjp, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        old = self.shape
        return Tensor._result(
            self.data.reshape(*shape), (self,), lambda g: (g.reshape(old),), "reshape"
        )

    @property
    def T(self) -> "Tensor":
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """Untracked copy of ``x``; gradients never flow through the result."""
    if isinstance(x, Tensor):
        return x.detach()
    return Tensor(x)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise DimensionError("matmul supports 1-D and 2-D operands only")
    a2 = a.data if a.ndim == 2 else a.data[None, :]
    b2 = b.data if b.ndim == 2 else b.data[:, None]
    if a2.shape[1] != b2.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    out2 = a2 @ b2
    out_shape = tuple(
        s for s, keep in ((out2.shape[0], a.ndim == 2), (out2.shape[1], b.ndim == 2)) if keep
    )
    sa, sb = a.shape, b.shape

    def vjp(g):
        g2 = np.asarray(g).reshape(out2.shape)
        return (g2 @ b2.T).reshape(sa), (a2.T @ g2).reshape(sb)

    return Tensor._result(out2.reshape(out_shape), (a, b), vjp, "matmul")


def dot(a: Tensor, b: Tensor) -> Tensor:
    return matmul(a, b)


def log_sum_exp(v: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """``max(v) + log(sum(exp(v - max(v))))``, reduced over ``axis``."""
    v = as_tensor(v)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise ValueError("log_sum_exp of an empty tensor")
    x = v.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = m + np.log(s)
    soft = e / s
    if not keepdims:
        out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def vjp(g):
        if not keepdims:
            g = np.reshape(g, ()) if axis is None else np.expand_dims(g, axis)
        return (g * soft,)

    return Tensor._result(out, (v,), vjp, "log_sum_exp")


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)
    wa = np.exp(a.data - out)
    wb = np.exp(b.data - out)
    return Tensor._result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)),
        "logaddexp",
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return Tensor._result(
        out,
        (x,),
        lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
        "log_softmax",
    )


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row (or a single vector) to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    if (norm == 0).any():
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    y = x.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return Tensor._result(y, (x,), vjp, "normalize")


def cosine_sim(a: Tensor, b: Tensor, tau_prime: float = 1.0) -> Tensor:
    """Cosine similarity of two vectors divided by a temperature."""
    if tau_prime <= 0:
        raise ValueError("temperature must be positive")
    return dot(normalize_rows(a), normalize_rows(b)) * (1.0 / tau_prime)


def cosine_matrix(a: Tensor, b: Tensor, tau_prime: float = 1.0) -> Tensor:
    """Pairwise cosine similarities between the rows of ``a`` and ``b``, over ``tau_prime``."""
    if tau_prime <= 0:
        raise ValueError("temperature must be positive")
    return matmul(normalize_rows(a), normalize_rows(b).T) * (1.0 / tau_prime)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, vjp, "concat"
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def vjp(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._result(np.stack([t.data for t in tensors], axis=axis), tensors, vjp, "stack")


class Tape:
    """Operations reachable from ``root``, in the order they were recorded."""

    def __init__(self, root: Tensor):
        seen: dict[int, Tensor] = {}
        pending = [root]
        while pending:
            node = pending.pop()
            if id(node) in seen or not node.requires_grad:
                continue
            seen[id(node)] = node
            pending.extend(node._parents)
        self.nodes = sorted(seen.values(), key=lambda t: t._id)
        self.root = root

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._vjp is None]

    def replay(self) -> dict[Tensor, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(self.root): np.ones(self.root.shape)}
        for node in reversed(self.nodes):
            g = grads.get(id(node))
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if not parent.requires_grad or pg is None:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.asarray(pg, dtype=np.float64)
        out = {}
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            out[leaf] = np.zeros(leaf.shape) if g is None else np.asarray(g).reshape(leaf.shape)
        return out


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradient of scalar ``root`` with respect to every tracked leaf it depends on.

    The gradients are also stored on each leaf's ``grad`` attribute.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = Tape(root).replay()
    for leaf, g in grads.items():
        _check_finite(g, "backward")
        leaf.grad = g
    return grads


def finite_diff_errors(
    f: Callable[[Tensor], Tensor], x, h: float = 1e-5
) -> np.ndarray:
    """Per-coordinate ``|analytic - central| / max(1, |analytic|)``."""
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0, requires_grad=True)
    analytic = backward(f(leaf)).get(leaf, np.zeros(x0.shape)).ravel()
    errors = np.zeros(x0.size)
    for i in range(x0.size):
        xp = x0.copy().ravel()
        xm = x0.copy().ravel()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        numeric = (fp - fm) / (2 * h)
        errors[i] = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
    return errors.reshape(x0.shape)


def finite_diff_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``."""
    errors = finite_diff_errors(f, x, h)
    return float(errors.max()) if errors.size else 0.0


