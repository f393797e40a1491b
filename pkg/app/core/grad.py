"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside a ``Tape`` context are recorded whenever one of
their inputs requires a gradient. ``backward(root)`` replays the tape in
reverse and stores ``d root / d leaf`` on every leaf that asked for it.
A tape serves exactly one backward sweep.

Broadcasting is limited to scalar-tensor pairs (one operand of size 1).
"""
from __future__ import annotations

import threading
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import (
    GradCheckError,
    ShapeMismatchError,
    TapeError,
    ZeroNormError,
)

NORM_FLOOR = 1e-12

Number = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def _tape_stack() -> List["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def active_tape() -> Optional["Tape"]:
    """Innermost tape of the calling thread, if any."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations for one backward sweep."""

    def __init__(self):
        self._records: List[Tuple["Tensor", Tuple["Tensor", ...], BackwardFn]] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def record(self, out: "Tensor", parents: Tuple["Tensor", ...], backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise TapeError("cannot record on a consumed tape")
        self._records.append((out, parents, backward_fn))

    def backward(self, root: "Tensor") -> None:
        if self._consumed:
            raise TapeError("tape already consumed by a backward sweep")
        if root.size != 1:
            raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
        self._consumed = True

        grads = {id(root): np.ones(root.shape, dtype=np.float64)}
        leaves = {}
        for out, parents, backward_fn in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
                if parent._is_leaf:
                    leaves[key] = parent

        for key, leaf in leaves.items():
            g = np.array(grads[key], dtype=np.float64).reshape(leaf.shape)
            g.setflags(write=False)
            leaf.grad = g
        self._records.clear()


class Tensor:
    """Immutable dense float64 array, optionally tracked for differentiation."""

    __slots__ = ("_data", "requires_grad", "grad", "_is_leaf", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        arr.setflags(write=False)
        self._data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._is_leaf = True
        self._tape: Optional[Tape] = None

    @classmethod
    def constant(cls, arr: np.ndarray) -> "Tensor":
        """Wrap an array without copying; the array becomes read-only."""
        out = cls._result(arr)
        out._is_leaf = True
        return out

    @classmethod
    def _result(cls, arr: np.ndarray) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = arr.copy()
        arr.setflags(write=False)
        out._data = arr
        out.requires_grad = False
        out.grad = None
        out._is_leaf = False
        out._tape = None
        return out

    # ------------------------------------------------------------------ info

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def shape(self) -> Tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def tape(self) -> Optional[Tape]:
        return self._tape

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def item(self) -> float:
        if self.size != 1:
            raise ShapeMismatchError("item", self.shape, ())
        return float(self._data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # ------------------------------------------------------------- operators

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis: Optional[int] = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: Optional[int] = None) -> "Tensor":
        return mean(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


TensorLike = Union[Tensor, Number, np.ndarray]


def as_tensor(value: TensorLike) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


def _emit(arr: np.ndarray, parents: Tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    out = Tensor._result(arr)
    if not np.all(np.isfinite(out.data)) and all(np.all(np.isfinite(p.data)) for p in parents):
        raise FloatingPointError("operation produced non-finite values from finite inputs")
    if any(p.requires_grad for p in parents):
        tape = active_tape()
        if tape is not None:
            out.requires_grad = True
            out._tape = tape
            tape.record(out, parents, backward_fn)
    return out


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.full(shape, g.sum())


def _broadcast_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeMismatchError(op, a.shape, b.shape)


# --------------------------------------------------------------- elementwise

def add(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("add", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("sub", a, b)

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("mul", a, b)

    def backward(g):
        return _reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)

    return _emit(a.data * b.data, (a, b), backward)


def div(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_pair("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _reduce_to(g / b.data, a.shape), _reduce_to(-g * out / b.data, b.shape)

    return _emit(out, (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit(out, (x,), lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0.0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _emit(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0.0):
        raise ValueError("log of a non-positive value")
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; the gradient passes where lo <= x <= hi."""
    mask = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * mask,))


def smooth_round(x: Tensor) -> Tensor:
    """round(x) + (x - round(x))**3, a differentiable stand-in for rounding."""
    r = np.round(x.data)
    frac = x.data - r
    return _emit(r + frac ** 3, (x,), lambda g: (g * 3.0 * frac * frac,))


# --------------------------------------------------------------- reductions

def tsum(x: Tensor, axis: Optional[int] = None) -> Tensor:
    out = x.data.sum(axis=axis)

    def backward(g):
        if axis is None:
            return (np.full(x.shape, float(np.asarray(g).reshape(-1)[0])),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _emit(np.asarray(out), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def logsumexp(x: Tensor, axis: Optional[int] = None) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = np.exp(x.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = np.log(total) + m
    soft = shifted / total
    out = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)

    def backward(g):
        g = np.asarray(g)
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _emit(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _emit(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < NORM_FLOOR):
        raise ZeroNormError("cannot L2-normalize a vector with norm below 1e-12")
    out = x.data / norm

    def backward(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _emit(out, (x,), backward)


# --------------------------------------------------------------- structure

def matmul(a: TensorLike, b: TensorLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def backward(g):
        a2 = a.data if a.ndim == 2 else a.data[None, :]
        b2 = b.data if b.ndim == 2 else b.data[:, None]
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        return (g2 @ b2.T).reshape(a.shape), (a2.T @ g2).reshape(b.shape)

    return _emit(out, (a, b), backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeMismatchError("reshape", x.shape, tuple(shape)) from None
    return _emit(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    out = np.transpose(x.data, axes)
    inverse = None if axes is None else np.argsort(axes)
    return _emit(out, (x,), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    out = np.array(x.data[index], dtype=np.float64)

    def backward(g):
        full = np.zeros(x.shape, dtype=np.float64)
        np.add.at(full, index, g)
        return (full,)

    return _emit(out, (x,), backward)


def concatenate(tensors: Sequence[TensorLike], axis: int = 0) -> Tensor:
    parts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError:
        raise ShapeMismatchError("concatenate", parts[0].shape, parts[-1].shape) from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _emit(out, parts, lambda g: tuple(np.split(g, bounds, axis=axis)))


# --------------------------------------------------------------- similarity

def cosine_similarity(u: TensorLike, v: TensorLike) -> Tensor:
    """Cosine of the angle between two equal-length vectors, in [-1, 1]."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatchError("cosine_similarity", u.shape, v.shape)
    nu = float(u.data @ u.data)
    nv = float(v.data @ v.data)
    if np.sqrt(nu) < NORM_FLOOR or np.sqrt(nv) < NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a vector with norm below 1e-12")
    # sqrt(nu * nv) keeps cos(u, u) at exactly 1.0
    denom = float(np.sqrt(nu * nv))
    value = min(1.0, max(-1.0, float(u.data @ v.data) / denom))

    def backward(g):
        g = float(np.asarray(g).reshape(-1)[0])
        return g * (v.data / denom - value * u.data / nu), g * (u.data / denom - value * v.data / nv)

    return _emit(np.asarray(value), (u, v), backward)


def cosine_value(u, v) -> float:
    """Plain-float cosine of two arrays (flattened), no tape involved."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64).reshape(-1)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeMismatchError("cosine_value", u.shape, v.shape)
    nu = float(u @ u)
    nv = float(v @ v)
    if np.sqrt(nu) < NORM_FLOOR or np.sqrt(nv) < NORM_FLOOR:
        raise ZeroNormError("cosine similarity of a vector with norm below 1e-12")
    return min(1.0, max(-1.0, float(u @ v) / float(np.sqrt(nu * nv))))


def backward(root: Tensor) -> None:
    """Materialize d root / d leaf on every leaf that requires a gradient."""
    if root.size != 1:
        raise TapeError(f"backward root must be a scalar, got shape {root.shape}")
    if root.tape is None:
        raise TapeError("root was not produced on a tape")
    root.tape.backward(root)


def grad_check(f: Callable[[Tensor], Tensor], point: TensorLike, step: float = 1e-6) -> float:
    """
    Compare analytic gradients of ``f`` with central differences.

    Returns the max over coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not step > 0.0:
        raise GradCheckError(f"finite-difference step must be positive, got {step}")
    base = np.array(as_tensor(point).data, dtype=np.float64)

    x = Tensor(base, requires_grad=True)
    with Tape():
        y = f(x)
        if y.size != 1:
            raise GradCheckError(f"f must be scalar-valued, got shape {y.shape}")
        if not np.isfinite(y.item()):
            raise GradCheckError("f is not finite at the probe point")
        backward(y)
    analytic = x.grad.reshape(-1) if x.grad is not None else np.zeros(base.size)

    flat = base.reshape(-1)
    worst = 0.0
    for i in range(flat.size):
        probe = flat.copy()
        probe[i] += step
        hi = f(Tensor(probe.reshape(base.shape))).item()
        probe[i] -= 2.0 * step
        lo = f(Tensor(probe.reshape(base.shape))).item()
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise GradCheckError(f"f is not finite around coordinate {i}")
        numeric = (hi - lo) / (2.0 * step)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
