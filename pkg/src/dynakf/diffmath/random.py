"""Seeded sampling with pathwise gradients: Gaussian, Gamma and Dirichlet.

Gamma(alpha, 1) variates are always drawn through the shape-boosting identity
``x = y * U**(1/alpha)`` with ``y ~ Gamma(alpha + 1)`` (Marsaglia-Tsang) and
``U ~ Uniform(0, 1]``, and carried in log space so that tiny concentrations do
not underflow.  The derivative of ``y`` with respect to its shape comes from
implicit reparameterisation, ``dy/ds = -(dF/ds) / f(y)``, with ``F`` the
regularised lower incomplete gamma function.

Base noise can be captured with :class:`NoiseRecorder` and replayed with
:class:`FrozenNoise`; replay inverts the recorded CDF levels at the current
shape, so a frozen sample is a smooth function of ``alpha``.
"""

from __future__ import annotations

import numpy as np
from scipy.special import digamma, gammainc, gammaincc, gammainccinv, gammaincinv, gammaln

from .tensor import Tensor, as_tensor, make

__all__ = [
    "RngStream",
    "NoiseRecorder",
    "FrozenNoise",
    "sample_gaussian",
    "sample_gamma",
    "sample_dirichlet",
    "marsaglia_tsang",
    "gamma_shape_derivative",
    "DIRICHLET_GUARD",
]

# Dirichlet outputs are mapped to ``g + (1 - K g) * D`` so that every entry is
# strictly inside (0, 1) in float64 even when one component absorbs all mass.
DIRICHLET_GUARD = 1e-12


class RngStream:
    """Counter-based (Philox) random stream identified by a seed and a key path."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size) -> np.ndarray:
        """Uniform on (0, 1]."""
        return 1.0 - self._gen.random(size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gamma(self, shape: np.ndarray) -> np.ndarray:
        """Gamma(shape, 1) variates for shape >= 1."""
        return marsaglia_tsang(shape, self._gen)


def marsaglia_tsang(shape: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    s = np.asarray(shape, dtype=np.float64)
    if (s < 1.0).any():
        raise ValueError("marsaglia_tsang requires shape >= 1; boost smaller shapes")
    d = s - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty(s.shape)
    flat_out = out.reshape(-1)
    dflat, cflat = d.reshape(-1), c.reshape(-1)
    pending = np.arange(s.size)
    while pending.size:
        n = gen.standard_normal(pending.size)
        u = gen.random(pending.size)
        dd, cc = dflat[pending], cflat[pending]
        v = (1.0 + cc * n) ** 3
        pos = v > 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            logv = np.log(np.where(pos, v, 1.0))
            accept = pos & (np.log(u) < 0.5 * n * n + dd - dd * v + dd * logv)
        flat_out[pending[accept]] = dd[accept] * v[accept]
        pending = pending[~accept]
    return out


class NoiseRecorder:
    """Wraps an :class:`RngStream` and keeps every draw for later replay."""

    def __init__(self, rng: RngStream, draws: list | None = None):
        self.rng = rng
        self.draws: list[tuple[str, object]] = [] if draws is None else draws

    def child(self, *key: int) -> "NoiseRecorder":
        # children draw from the real child stream but log into the shared list
        return NoiseRecorder(self.rng.child(*key), self.draws)

    def normal(self, size) -> np.ndarray:
        x = self.rng.normal(size)
        self.draws.append(("normal", x.copy()))
        return x

    def uniform(self, size) -> np.ndarray:
        x = self.rng.uniform(size)
        self.draws.append(("uniform", x.copy()))
        return x

    def gamma(self, shape: np.ndarray) -> np.ndarray:
        shape = np.asarray(shape, dtype=np.float64)
        y = self.rng.gamma(shape)
        self.draws.append(("gamma", (gammainc(shape, y), gammaincc(shape, y))))
        return y

    def frozen(self) -> "FrozenNoise":
        return FrozenNoise(self.draws)


class FrozenNoise:
    """Replays recorded base noise in call order; call :meth:`rewind` per pass."""

    def __init__(self, draws):
        self.draws = list(draws)
        self.cursor = 0

    def rewind(self) -> "FrozenNoise":
        self.cursor = 0
        return self

    def child(self, *key: int) -> "FrozenNoise":
        # replay follows the recorded call order, so children share the cursor
        return self

    def _next(self, kind: str):
        if self.cursor >= len(self.draws):
            raise RuntimeError("frozen noise exhausted; the replayed graph draws more than the recorded one")
        got, payload = self.draws[self.cursor]
        if got != kind:
            raise RuntimeError(f"frozen noise mismatch: expected {got!r} draw, replay asked for {kind!r}")
        self.cursor += 1
        return payload

    def normal(self, size) -> np.ndarray:
        x = self._next("normal")
        return np.array(x).reshape(size)

    def uniform(self, size) -> np.ndarray:
        x = self._next("uniform")
        return np.array(x).reshape(size)

    def gamma(self, shape: np.ndarray) -> np.ndarray:
        shape = np.asarray(shape, dtype=np.float64)
        p, q = self._next("gamma")
        # invert from whichever tail keeps precision
        lower = gammaincinv(shape, p)
        upper = gammainccinv(shape, q)
        return np.where(p <= 0.5, lower, upper)


def sample_gaussian(shape, mu: float = 0.0, sigma: float = 1.0, rng=None) -> Tensor:
    if sigma < 0:
        raise ValueError(f"sample_gaussian: sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return Tensor(np.full(shape, float(mu)))
    return Tensor(mu + sigma * rng.normal(shape))


_LAG_NODES, _LAG_WEIGHTS = np.polynomial.laguerre.laggauss(64)


def _shape_derivative_series(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    # dF/ds from F(s, y) = sum_n exp((s+n) log y - y - lgamma(s+n+1)), divided
    # by the density in log space; terms share a sign while y <= s + 1/2
    n_terms = int(y.max() + 12.0 * np.sqrt(y.max()) + 40.0)
    n = np.arange(n_terms, dtype=np.float64)
    logy = np.log(y)[:, None]
    sn = s[:, None] + n
    ratio = np.exp((n + 1.0) * logy + gammaln(s)[:, None] - gammaln(sn + 1.0))
    return -(ratio * (logy - digamma(sn + 1.0))).sum(axis=1)


def _shape_derivative_upper(s: np.ndarray, y: np.ndarray) -> np.ndarray:
    # dy/ds = int_0^inf (1 + t/y)^(s-1) e^-t (log(y + t) - digamma(s)) dt, from
    # differentiating the upper tail; rescaled so Gauss-Laguerre sees a
    # decaying, positive integrand
    lam = 1.0 - (s - 1.0) / y
    tau = _LAG_NODES[None, :] / lam[:, None]
    w = tau / y[:, None]
    bracket = np.exp((s - 1.0)[:, None] * (np.log1p(w) - w))
    f = bracket * (np.log(y[:, None] + tau) - digamma(s)[:, None])
    return (f * _LAG_WEIGHTS).sum(axis=1) / lam


def gamma_shape_derivative(shape: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``dy/ds`` holding ``F(y; s)`` fixed, for Gamma(s, 1) variates ``y`` (s >= 1)."""
    s = np.asarray(shape, dtype=np.float64).reshape(-1)
    yv = np.asarray(y, dtype=np.float64).reshape(-1)
    out = np.empty(yv.shape)
    upper = yv > s + 3.0 * np.sqrt(s)
    if (~upper).any():
        out[~upper] = _shape_derivative_series(s[~upper], yv[~upper])
    if upper.any():
        out[upper] = _shape_derivative_upper(s[upper], yv[upper])
    return out.reshape(np.shape(y))


def _log_gamma_variates(alpha: np.ndarray, rng) -> tuple[np.ndarray, np.ndarray]:
    """Log Gamma(alpha, 1) variates and their derivative wrt alpha."""
    s = alpha + 1.0
    y = rng.gamma(s)
    u = rng.uniform(alpha.shape)
    log_u = np.log(u)
    log_x = np.log(y) + log_u / alpha
    dlogx = gamma_shape_derivative(s, y) / y - log_u / (alpha * alpha)
    return log_x, dlogx


def _check_alpha(kind: str, a: np.ndarray) -> None:
    bad = np.argwhere(~(a > 0.0))
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise ValueError(f"{kind}: concentration must be > 0, got {a[idx]!r} at index {idx}")


def sample_gamma(alpha, rng) -> Tensor:
    """Gamma(alpha, 1) variates, differentiable wrt ``alpha``."""
    alpha = as_tensor(alpha)
    a = alpha.value
    _check_alpha("sample_gamma", a)
    log_x, dlogx = _log_gamma_variates(a, rng)
    x = np.exp(log_x)
    return make("gamma", x, (alpha,), lambda g: (g * x * dlogx,))


def sample_dirichlet(alpha, rng) -> Tensor:
    """Dirichlet variates over the last axis of ``alpha``.

    Components are normalised Gamma variates; the result is differentiable
    wrt ``alpha`` through the pathwise Gamma derivative.
    """
    alpha = as_tensor(alpha)
    a = alpha.value
    _check_alpha("sample_dirichlet", a)
    k = a.shape[-1]
    log_x, dlogx = _log_gamma_variates(a, rng)
    e = np.exp(log_x - log_x.max(axis=-1, keepdims=True))
    dist = e / e.sum(axis=-1, keepdims=True)
    scale = 1.0 - k * DIRICHLET_GUARD
    out = DIRICHLET_GUARD + scale * dist

    def vjp(g):
        gd = g * scale
        inner = (gd - (gd * dist).sum(axis=-1, keepdims=True)) * dist
        return (inner * dlogx,)

    return make("dirichlet", out, (alpha,), vjp)
