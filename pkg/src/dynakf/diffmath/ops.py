"""Differentiable operations on :class:`Tensor`.

Every function accepts Tensors, ndarrays or Python scalars and returns a
Tensor.  Elementwise binaries require equal shapes unless one side is a
scalar (0-d).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import expit

from .tensor import ShapeError, Tensor, as_tensor, make

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "affine", "sigmoid", "tanh",
    "relu", "exp", "log", "sqrt", "square", "reciprocal", "sum", "mean",
    "concat", "slice", "transpose", "reshape", "softmax", "solve",
    "diag_embed", "diagonal", "kink_watch",
]

# when set, relu appends its active mask here (used to spot kink crossings in finite differences)
_KINK_LOG: list | None = None


class kink_watch:
    """Collect the active-set masks of every relu evaluated inside the block."""

    def __enter__(self) -> list:
        global _KINK_LOG
        self._prev, _KINK_LOG = _KINK_LOG, []
        return _KINK_LOG

    def __exit__(self, *exc):
        global _KINK_LOG
        _KINK_LOG = self._prev
        return False


def _is_scalar(a: np.ndarray) -> bool:
    return a.ndim == 0


def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and not (_is_scalar(a.value) or _is_scalar(b.value)):
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    # leading batch axes introduced by matmul broadcasting
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    sa, sb = a.shape, b.shape
    return make("add", a.value + b.value, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    sa, sb = a.shape, b.shape
    return make("sub", a.value - b.value, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    av, bv = a.value, b.value
    return make(
        "mul", av * bv, (a, b),
        lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv

    def vjp(g):
        gb = -g * out / bv
        return _reduce_to(g / bv, av.shape), _reduce_to(gb, bv.shape)

    return make("div", out, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make("neg", -a.value, (a,), lambda g: (-g,))


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least rank 2, got {a.shape} and {b.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    if av.ndim > 2 and bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} differ")
    out = av @ bv

    def vjp(g):
        return _reduce_to(g @ _swap(bv), av.shape), _reduce_to(_swap(av) @ g, bv.shape)

    return make("matmul", out, (a, b), vjp)


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` with ``b`` of shape (k,) added to every row."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        raise ShapeError(f"affine: shapes {x.shape} and {w.shape} do not conform")
    if bv.shape != (wv.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match output width {wv.shape[1]}")
    out = xv @ wv + bv
    return make("affine", out, (x, w, b), lambda g: (g @ wv.T, xv.T @ g, g.sum(axis=0)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = expit(a.value)
    return make("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.value)
    return make("tanh", t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.value > 0.0  # subgradient 0 at exactly 0
    if _KINK_LOG is not None:
        _KINK_LOG.append(mask)
    return make("relu", np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        e = np.exp(a.value)
    return make("exp", e, (a,), lambda g: (g * e,))


def log(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(av)
    return make("log", out, (a,), lambda g: (g / av,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        r = np.sqrt(a.value)
    with np.errstate(divide="ignore"):
        inv = 0.5 / r
    return make("sqrt", r, (a,), lambda g: (g * inv,))


def square(a) -> Tensor:
    a = as_tensor(a)
    av = a.value
    return make("square", av * av, (a,), lambda g: (2.0 * g * av,))


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        r = 1.0 / a.value
    return make("reciprocal", r, (a,), lambda g: (-g * r * r,))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make("sum", np.asarray(out), (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: empty input")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ts[0].shape)) if i != ax
        ):
            raise ShapeError(f"concat: shapes {ts[0].shape} and {t.shape} do not conform on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.value for t in ts], axis=ax)
    return make("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=ax)))


def slice(a, index) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    out = a.value[index]
    advanced = _is_advanced(index)

    def vjp(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return make("slice", np.array(out, dtype=np.float64), (a,), vjp)


def _is_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def transpose(a) -> Tensor:
    """Swap the last two axes."""
    a = as_tensor(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose: need rank >= 2, got {a.shape}")
    return make("transpose", _swap(a.value).copy(), (a,), lambda g: (_swap(g).copy(),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.value.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return make("reshape", out, (a,), lambda g: (g.reshape(old),))


def softmax(a) -> Tensor:
    """Softmax over the last axis."""
    a = as_tensor(a)
    z = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return ((g - (g * s).sum(axis=-1, keepdims=True)) * s,)

    return make("softmax", s, (a,), vjp)


def solve(s, b) -> Tensor:
    """``S^{-1} B`` for (batched) symmetric positive definite ``S``.

    Cholesky failure means ``S`` is not SPD, which upstream positivity
    constraints rule out; it is raised as an assertion.
    """
    s, b = as_tensor(s), as_tensor(b)
    sv, bv = s.value, b.value
    if sv.shape[-1] != sv.shape[-2] or sv.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"solve: shapes {s.shape} and {b.shape} do not conform")
    try:
        np.linalg.cholesky(sv)
    except np.linalg.LinAlgError as exc:
        raise AssertionError("solve: matrix is not symmetric positive definite") from exc
    x = np.linalg.solve(sv, bv)

    def vjp(g):
        gb = np.linalg.solve(_swap(sv), g)
        return _reduce_to(-gb @ _swap(x), sv.shape), _reduce_to(gb, bv.shape)

    return make("solve", x, (s, b), vjp)


def diag_embed(v) -> Tensor:
    """(..., d) -> (..., d, d) with ``v`` on the diagonal."""
    v = as_tensor(v)
    d = v.shape[-1]
    eye = np.eye(d)
    out = v.value[..., :, None] * eye
    return make("diag_embed", out, (v,), lambda g: (np.diagonal(g, axis1=-2, axis2=-1).copy(),))


def diagonal(m) -> Tensor:
    """(..., d, d) -> (..., d)."""
    m = as_tensor(m)
    d = m.shape[-1]
    eye = np.eye(d)
    out = np.diagonal(m.value, axis1=-2, axis2=-1).copy()
    return make("diagonal", out, (m,), lambda g: (g[..., :, None] * eye,))
