"""Deterministic mathematics shared by every other module.

Scaling functions, the path-count entropy ``eta``, the variational functional
``phi``, the regularized incomplete Beta function and the weight entering the
closed form of the ageing function.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betaln, gammaln

from .errors import DomainError


def beta_fn(a: float, b: float) -> float:
    return math.exp(betaln(a, b))


@dataclass(frozen=True)
class ModelParams:
    """Lattice dimension ``d`` and Pareto tail index ``alpha`` plus derived constants.

    ``q = d/(alpha-d)`` is the slope of the boundary of the limiting point process,
    ``theta_const`` the prefactor of the closed-form region masses and
    ``i_tail_const`` the limit of ``theta**d * I(theta)``.
    """

    d: int
    alpha: float
    q: float = field(init=False)
    theta_const: float = field(init=False)
    i_tail_const: float = field(init=False)

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise DomainError(f"d must be a positive integer, got {self.d!r}")
        if not (self.alpha > self.d) or not math.isfinite(self.alpha):
            raise DomainError(f"need alpha > d, got alpha={self.alpha}, d={self.d}")
        d, a = int(self.d), float(self.alpha)
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "alpha", a)
        q = d / (a - d)
        object.__setattr__(self, "q", q)
        object.__setattr__(
            self, "theta_const",
            2.0 ** d * beta_fn(a - d, d) / (q ** d * math.factorial(d - 1)),
        )
        object.__setattr__(self, "i_tail_const", 1.0 / (d * beta_fn(a - d + 1, d)))

    @property
    def ball_const(self) -> float:
        """``2^d/(d-1)!``: surface factor of the l1 sphere, ``Vol(B_r) = ball_const * r^d / d``."""
        return 2.0 ** self.d / math.factorial(self.d - 1)

    def to_dict(self) -> dict:
        return {"d": self.d, "alpha": self.alpha}


PRESETS = {
    "d1": ModelParams(1, 2.0),
    "d2": ModelParams(2, 4.0),
}


def l1_norm(site: Sequence[int]) -> int:
    return int(sum(abs(int(c)) for c in site))


def _check_time(t: float) -> None:
    if not t > 1:
        raise DomainError(f"scaling functions need t > 1, got {t}")


def scale_r(params: ModelParams, t: float) -> float:
    """Spatial scale ``(t/log t)^(alpha/(alpha-d))``."""
    _check_time(t)
    return (t / math.log(t)) ** (params.alpha / (params.alpha - params.d))


def scale_a(params: ModelParams, t: float) -> float:
    """Potential scale ``(t/log t)^(d/(alpha-d))``."""
    _check_time(t)
    return (t / math.log(t)) ** params.q


def eta(site: Sequence[int]) -> float:
    """Log of the number of shortest lattice paths from the origin to ``site``."""
    coords = [abs(int(c)) for c in site]
    n = sum(coords)
    if n == 0 or max(coords) == n:
        return 0.0
    return float(gammaln(n + 1) - sum(gammaln(c + 1) for c in coords))


def eta_array(abs_coords: np.ndarray) -> np.ndarray:
    """Vectorized ``eta`` over rows of absolute coordinates, shape ``(n, d)``."""
    abs_coords = np.asarray(abs_coords, dtype=np.float64)
    if abs_coords.ndim == 1:
        return np.zeros(abs_coords.shape[0])
    n = abs_coords.sum(axis=1)
    out = gammaln(n + 1) - gammaln(abs_coords + 1).sum(axis=1)
    return np.maximum(out, 0.0)


def phi(params: ModelParams, t: float, site: Sequence[int], xi_value: float) -> float:
    """Variational functional ``xi - (|z|/t) log xi + eta(z)/t``, zero where ``t*xi < |z|``."""
    if xi_value < 1:
        raise DomainError(f"potential values live on [1, inf), got {xi_value}")
    if not t > 0:
        raise DomainError(f"need t > 0, got {t}")
    n = l1_norm(site)
    if t * xi_value < n:
        return 0.0
    if n == 0:
        return float(xi_value)
    return xi_value - (n * math.log(xi_value) - eta(site)) / t


def phi_array(t: float, xi: np.ndarray, norm: np.ndarray, eta_vals: np.ndarray) -> np.ndarray:
    """Vectorized ``phi`` from precomputed potential, l1 norm and ``eta`` arrays."""
    xi = np.asarray(xi, dtype=np.float64)
    norm = np.asarray(norm, dtype=np.float64)
    val = xi - (norm * np.log(xi) - eta_vals) / t
    return np.where(t * xi >= norm, val, 0.0)


# -- regularized incomplete Beta ------------------------------------------------

_CF_EPS = 1e-15
_CF_TINY = 1e-300
_CF_MAXIT = 10_000


def _beta_cf(x: float, a: float, b: float) -> float:
    """Modified Lentz evaluation of the continued fraction for I_x(a, b)."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    dd = 1.0 - qab * x / qap
    if abs(dd) < _CF_TINY:
        dd = _CF_TINY
    dd = 1.0 / dd
    h = dd
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        dd = 1.0 + aa * dd
        if abs(dd) < _CF_TINY:
            dd = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        dd = 1.0 / dd
        h *= dd * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        dd = 1.0 + aa * dd
        if abs(dd) < _CF_TINY:
            dd = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        dd = 1.0 / dd
        delta = dd * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Normalized incomplete Beta function ``B~(x, a, b)``.

    Continued fraction on the side of the distribution where it converges fast,
    with the reflection ``B~(x,a,b) = 1 - B~(1-x,b,a)`` for ``x > (a+1)/(a+b+2)``.
    """
    if not (a > 0 and b > 0):
        raise DomainError(f"need a, b > 0, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) - betaln(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(x, a, b) / a
    return 1.0 - math.exp(log_front) * _beta_cf(1.0 - x, b, a) / b


def inv_phi_weight(params: ModelParams, theta: float, v: float) -> float:
    """``1/phi_theta(v)``; this is ``nu(D_theta)`` in units of ``theta_const * y^(d-alpha)``."""
    if not v > 0 or v > 1:
        raise DomainError(f"v must lie in (0, 1], got {v}")
    if theta < 0:
        raise DomainError(f"theta must be nonnegative, got {theta}")
    a, d = params.alpha, params.d
    if theta == 0:
        return 1.0
    inner = reg_inc_beta(v, a - d, d)
    outer = reg_inc_beta(min((v + theta) / (1 + theta), 1.0), a - d, d)
    # (1+theta)^alpha (theta/v + 1)^(d-alpha) evaluated in log space
    log_fac = a * math.log1p(theta) + (d - a) * math.log1p(theta / v)
    return 1.0 - inner + math.exp(log_fac) * outer


def inv_phi_weight_minus_one(params: ModelParams, theta: float, v: float) -> float:
    """``1/phi_theta(v) - 1`` without cancellation for small ``theta``."""
    if theta == 0:
        return 0.0
    a, d = params.alpha, params.d
    inner = reg_inc_beta(v, a - d, d)
    x_out = min((v + theta) / (1 + theta), 1.0)
    outer = reg_inc_beta(x_out, a - d, d)
    log_fac = a * math.log1p(theta) + (d - a) * math.log1p(theta / v)
    # outer - inner is the Beta mass on [v, x_out], integrated directly when small
    gap = outer - inner
    if x_out - v < 1e-3:
        gap = _beta_mass(v, x_out, a - d, d)
    return gap + outer * math.expm1(log_fac)


def _beta_mass(lo: float, hi: float, a: float, b: float) -> float:
    from scipy.integrate import quad

    if hi <= lo:
        return 0.0
    val, _ = quad(lambda u: u ** (a - 1) * (1 - u) ** (b - 1), lo, hi, epsabs=0, epsrel=1e-13)
    return val / beta_fn(a, b)


def phi_weight(params: ModelParams, theta: float, v: float) -> float:
    """Weight ``phi_theta(v)`` in the integral representation of ``I(theta)``."""
    return 1.0 / inv_phi_weight(params, theta, v)
