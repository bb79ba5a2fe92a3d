"""
Dense tensors and a tape-based reverse-mode differentiation core.

A :class:`Tensor` wraps an immutable float64 numpy array of rank at most 4.
Operations executed while a :class:`GradTape` is active, and whose inputs
require gradients, are appended to that tape together with a closure that
maps the output gradient to input gradients.  :func:`backward` walks the
tape in reverse and stores the results on ``Tensor.grad``.

    >>> x = Tensor(np.arange(4.0), requires_grad=True)
    >>> with GradTape() as tape:
    ...     loss = (x * x).sum()
    >>> backward(loss, tape)
    >>> x.grad
    array([0., 2., 4., 6.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import DimensionError, UsageError

MAX_RANK = 4

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_active_tapes: list["GradTape"] = []


class Tensor:
    """Immutable rank-<=4 float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self._init(arr, requires_grad)

    def _init(self, arr: np.ndarray, requires_grad: bool) -> None:
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        if arr.ndim > 0 and min(arr.shape) < 1:
            raise DimensionError(f"tensor extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._tape: Optional[GradTape] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # Takes ownership of arr without copying.
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.array(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        t._init(arr, requires_grad)
        return t

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self, self._tape)


def _not_scalar(t: Tensor) -> float:
    raise DimensionError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class TapeRecord:
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward_fn: BackwardFn
    name: str


class GradTape:
    """Ordered record of differentiable operations.

    Use as a context manager; tapes nest and the innermost one records.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        """Drop all records, freeing the recorded graph without waiting for the cycle collector."""
        self.records.clear()

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> None:
        output._tape = self
        self.records.append(TapeRecord(output, tuple(inputs), backward_fn, name))


def active_tape() -> Optional[GradTape]:
    return _active_tapes[-1] if _active_tapes else None


def make_result(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn, name: str) -> Tensor:
    """Wrap ``arr`` as the output of an operation, recording it if needed."""
    needs_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, requires_grad=needs_grad)
    tape = active_tape()
    if needs_grad and tape is not None:
        tape.record(out, inputs, backward_fn, name)
    return out


def backward(loss: Tensor, tape: Optional[GradTape]) -> None:
    """Populate ``.grad`` of every gradient-requiring tensor reached from ``loss``.

    Raises UsageError if ``loss`` was not produced under ``tape``.
    """
    if tape is None or loss._tape is not tape:
        raise UsageError("backward() needs the tape that recorded the loss; run the forward pass inside GradTape()")
    if loss.size != 1:
        raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")

    end = next(i for i in range(len(tape.records) - 1, -1, -1) if tape.records[i].output is loss)
    records = tape.records[: end + 1]
    for rec in records:
        rec.output.grad = None
        for t in rec.inputs:
            t.grad = None

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    touched: dict[int, Tensor] = {id(loss): loss}
    for rec in reversed(records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        in_grads = rec.backward_fn(g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                touched[key] = t
    # Whatever remains are leaves (or tensors produced outside this tape).
    for key, g in grads.items():
        touched[key].grad = g
    for rec in records:
        for t in rec.inputs:
            if t.requires_grad and t.grad is None:
                t.grad = np.zeros_like(t.data)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return make_result(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return make_result(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def tsum(a: Tensor) -> Tensor:
    return make_result(np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, float(g)),), "sum")


def mean(a: Tensor) -> Tensor:
    n = a.size
    return make_result(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, float(g) / n),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape).copy()
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,), "relu")
