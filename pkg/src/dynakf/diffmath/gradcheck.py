"""Central finite-difference gradient verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .ops import kink_watch
from .tensor import Tape, Tensor, no_tape

__all__ = [
    "ParamReport",
    "GradCheckReport",
    "NonDeterministicError",
    "finite_difference",
    "relative_error",
    "grad_check",
]


class NonDeterministicError(RuntimeError):
    """Two forward passes at identical parameters disagreed."""


@dataclass
class ParamReport:
    name: str
    max_rel_error: float
    worst_index: tuple[int, ...]
    passed: bool
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)
    skipped: int = 0


@dataclass
class GradCheckReport:
    tolerance: float
    eps: float
    params: list[ParamReport]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    def failing(self) -> list[ParamReport]:
        return [p for p in self.params if not p.passed]

    def summary(self) -> str:
        lines = [f"grad_check eps={self.eps:g} tol={self.tolerance:g}"]
        for p in self.params:
            flag = "ok  " if p.passed else "FAIL"
            lines.append(f"  {flag} {p.name:<28s} max_rel={p.max_rel_error:.3e} at {p.worst_index}")
        return "\n".join(lines)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(t.name or f"param{i}", t) for i, t in enumerate(params)]


def _scalar(fn: Callable[[], Tensor]) -> float:
    with no_tape():
        out = fn()
    return float(np.asarray(out.value).reshape(-1)[0])


def _scalar_watched(fn: Callable[[], Tensor]) -> tuple[float, list]:
    with kink_watch() as masks:
        value = _scalar(fn)
    return value, masks


def _same_pattern(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def _ridders(f, h0: float, levels: int = 12, shrink: float = 1.4, safe: float = 2.0, floor: float = 1e-7):
    """Ridders' polynomial extrapolation of central differences f(h) = (g(+h) - g(-h)) / 2h.

    ``f`` returns (quotient, clean) where ``clean`` says no relu changed
    its active set at this step; unclean steps before the first clean one
    are passed over, so the sweep keeps shrinking (down to ``floor``) until
    it is inside the kink-free ball, then builds at most ``levels`` rows.
    Returns (estimate, clean).
    """
    c2 = shrink * shrink
    best, err = None, np.inf
    col: list[float] = []
    h = h0
    while h >= floor * h0 and len(col) < levels:
        q, clean = f(h)
        h /= shrink
        if not clean:
            if best is not None:
                break
            continue
        new = [q]
        fac = c2
        for j in range(1, len(col) + 1):
            new.append((new[j - 1] * fac - col[j - 1]) / (fac - 1.0))
            fac *= c2
            e = max(abs(new[j] - new[j - 1]), abs(new[j] - col[j - 1]))
            if e <= err:
                err, best = e, new[j]
        if best is None and len(new) == 1 and not col:
            best = q
        if len(col) and abs(new[-1] - col[-1]) >= safe * err:
            break
        col = new
    return (0.0, False) if best is None else (best, True)


def finite_difference(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6, method: str = "central",
                      kinks: np.ndarray | None = None) -> np.ndarray:
    """Finite-difference gradient of scalar ``fn()`` wrt every entry of ``param``.

    ``method="central"`` is the plain two-point quotient with step ``eps``;
    ``"ridders"`` extrapolates quotients from initial step ``eps`` downward,
    which resolves both tiny gradients and strongly curved entries.
    ``param.value`` is perturbed on a private copy and restored.  With
    ``kinks`` (bool, param's shape), entries where no perturbation keeps
    every relu on its active set are flagged there.
    """
    if method not in ("central", "ridders"):
        raise ValueError(f"unknown finite-difference method {method!r}")
    original = param.value
    work = original.copy()
    param.value = work
    grad = np.zeros(original.shape)
    watch = kinks is not None
    base = _scalar_watched(fn)[1] if watch else None
    try:
        for idx in np.ndindex(original.shape):
            x0 = work[idx]

            def quotient(h):
                work[idx] = x0 + h
                fp, mp = _scalar_watched(fn) if watch else (_scalar(fn), None)
                work[idx] = x0 - h
                fm, mm = _scalar_watched(fn) if watch else (_scalar(fn), None)
                work[idx] = x0
                clean = not watch or (_same_pattern(base, mp) and _same_pattern(base, mm))
                return (fp - fm) / (2.0 * h), clean

            if method == "central":
                grad[idx], clean = quotient(eps)
            else:
                grad[idx], clean = _ridders(quotient, eps)
            if watch and not clean:
                kinks[idx] = True
    finally:
        param.value = original
    return grad


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    eps: float = 1e-6,
    tolerance: float = 1e-6,
    method: str = "central",
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` takes no arguments and must read the parameter tensors it is
    checked against; any randomness must come from frozen base noise.
    ``skip_kinks`` leaves out entries whose perturbation flips any relu,
    where one-sided slopes differ and no difference quotient is meaningful.
    """
    named = _named(params)
    if _scalar(fn) != _scalar(fn):
        raise NonDeterministicError("function returned different values on identical parameters")
    with Tape() as tape:
        loss = fn()
    grads = tape.backward(loss)
    reports = []
    for name, p in named:
        analytic = np.array(grads[p], dtype=np.float64)
        kinks = np.zeros(p.shape, dtype=bool) if skip_kinks else None
        numeric = finite_difference(fn, p, eps, method, kinks)
        rel = relative_error(analytic, numeric)
        skipped = 0
        if kinks is not None:
            rel = np.where(kinks, 0.0, rel)
            skipped = int(kinks.sum())
        if rel.size:
            worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
            max_rel = float(rel[worst])
        else:
            worst, max_rel = (), 0.0
        reports.append(ParamReport(name, max_rel, tuple(int(i) for i in worst), max_rel < tolerance, analytic, numeric,
                                   skipped))
    return GradCheckReport(tolerance, eps, reports)
