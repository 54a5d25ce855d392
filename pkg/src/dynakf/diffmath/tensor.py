"""Tape-based reverse-mode differentiation over small dense float64 arrays.

A :class:`Tensor` is a thin wrapper around a ``float64`` ndarray.  Operations
executed while a :class:`Tape` is open are appended to it; ``Tape.backward``
then walks the nodes in reverse and accumulates vector-Jacobian products.

Broadcasting is limited to scalar-with-tensor for elementwise operations.
``matmul`` follows ``np.matmul`` when one operand is a shared rank-2 matrix
and the other carries a leading batch axis.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "NonFiniteError",
    "TapeError",
    "no_tape",
    "active_tape",
    "as_tensor",
]


class ShapeError(ValueError):
    """Operand shapes do not conform to an operation's rule."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of a tape (reused after backward, foreign loss, ...)."""


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _stack()
    return stack[-1] if stack else None


class no_tape:
    """Context manager suspending recording inside an open tape."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False


class Tensor:
    __slots__ = ("value", "_tape", "_node", "name")
    __array_priority__ = 100.0

    def __init__(self, value, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self._tape = None
        self._node = -1
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, value={np.array2string(self.value, precision=4)})"

    def __len__(self) -> int:
        return len(self.value)

    # operator sugar; the implementations live in ``ops``
    def __add__(self, other):
        return _ops().add(self, other)

    def __radd__(self, other):
        return _ops().add(other, self)

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    def __rmul__(self, other):
        return _ops().mul(other, self)

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().neg(self)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __rmatmul__(self, other):
        return _ops().matmul(other, self)

    def __getitem__(self, index):
        return _ops().slice(self, index)

    @property
    def T(self):
        return _ops().transpose(self)


def _ops():
    from . import ops

    return ops


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Append-only record of operations for one forward/backward pair.

    Usage::

        with Tape() as tape:
            loss = f(params)
        grads = tape.backward(loss)
        grads[params["W"]]
    """

    def __init__(self):
        self._inputs: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, ...]] = []
        self._leaves: dict[int, int] = {}
        self._keepalive: list[Tensor] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already consumed")
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self._vjps)

    def node_id(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        return self._leaves.get(id(t))

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf (parameter or constant) and return its id."""
        nid = self.node_id(t)
        if nid is not None:
            return nid
        nid = len(self._vjps)
        self._inputs.append(())
        self._vjps.append(None)
        self._shapes.append(t.value.shape)
        self._leaves[id(t)] = nid
        self._keepalive.append(t)
        return nid

    def record(self, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        if self._consumed:
            raise TapeError("tape already consumed")
        ids = tuple(self.watch(t) for t in inputs)
        out._tape = self
        out._node = len(self._vjps)
        self._inputs.append(ids)
        self._vjps.append(vjp)
        self._shapes.append(out.value.shape)

    def backward(self, loss: Tensor) -> "Gradients":
        if self._consumed:
            raise TapeError("tape already consumed")
        if loss.value.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        lid = self.node_id(loss)
        if lid is None:
            raise TapeError("loss was not produced on this tape")
        grads: list[np.ndarray | None] = [None] * len(self._vjps)
        grads[lid] = np.ones(self._shapes[lid])
        for i in range(lid, -1, -1):
            g = grads[i]
            vjp = self._vjps[i]
            if g is None or vjp is None:
                continue
            for j, gj in zip(self._inputs[i], vjp(g)):
                if gj is None:
                    continue
                grads[j] = gj if grads[j] is None else grads[j] + gj
        self._consumed = True
        return Gradients(self, grads)


class Gradients:
    """Gradient map keyed by node id; unreached nodes read as zeros."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def by_id(self, nid: int) -> np.ndarray:
        g = self._grads[nid]
        return np.zeros(self._tape._shapes[nid]) if g is None else g

    def __getitem__(self, t: Tensor) -> np.ndarray:
        nid = self._tape.node_id(t)
        if nid is None:
            return np.zeros(t.shape)
        return self.by_id(nid)

    def reached(self, t: Tensor) -> bool:
        nid = self._tape.node_id(t)
        return nid is not None and self._grads[nid] is not None

    def as_dict(self) -> dict[int, np.ndarray]:
        return {i: self.by_id(i) for i in range(len(self._grads))}

    def wrt(self, tensors: Iterable[Tensor]) -> list[np.ndarray]:
        return [self[t] for t in tensors]


def make(kind: str, value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, check finiteness and record it on the active tape."""
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{kind} produced non-finite values")
    out = Tensor(value)
    tape = active_tape()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out
