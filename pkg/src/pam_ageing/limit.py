"""The limiting Poisson process and its cone functionals.

Points live in ``{(x, y) : y > -q|x|}`` with intensity ``dx * alpha dy / (y + q|x|)**(alpha+1)``.
In coordinates ``(x, w)`` with ``w = y + q|x|`` the intensity factorizes as
Lebesgue in ``x`` times the Pareto density ``alpha w**(-alpha-1)``, which makes
exact sampling on two window shapes straightforward:

* ``BoxWindow(L, u_min)``: ``|x| <= L`` and ``w >= u_min``.
* ``ConeWindow(c, k)``: ``w > c + k|x|``. For ``k = q/t_hi`` every point outside
  has ``s_t <= c`` on ``(0, t_hi]``, so once the realized tip exceeds ``c`` the
  cone functionals on that range are exact.

The cone functional at time ``t`` is ``s_t = y + q(1 - 1/t)|x| = w - (q/t)|x|``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import integrate, special, stats

from . import prf
from .analytics import ModelParams, beta_fn, inv_phi_weight
from .errors import DomainError

DOM_PATTERN = 0x9A77
DOM_SHELL = 0x5E11
DOM_BATCH = 0xBA7C


@dataclass(frozen=True)
class BoxWindow:
    L: float
    u_min: float

    def __post_init__(self):
        if not (self.L > 0 and self.u_min > 0):
            raise DomainError(f"window needs L > 0 and u_min > 0, got {self.L}, {self.u_min}")

    def mass(self, params: ModelParams) -> float:
        return params.ball_const * self.L ** params.d / params.d * self.u_min ** (-params.alpha)

    def contains(self, rho: np.ndarray, w: np.ndarray) -> np.ndarray:
        return (rho <= self.L) & (w >= self.u_min)

    def to_dict(self) -> dict:
        return {"kind": "box", "L": self.L, "u_min": self.u_min}


@dataclass(frozen=True)
class ConeWindow:
    c: float
    k: float

    def __post_init__(self):
        if not (self.c > 0 and self.k > 0):
            raise DomainError(f"cone window needs c > 0 and k > 0, got {self.c}, {self.k}")

    def mass(self, params: ModelParams) -> float:
        d, a = params.d, params.alpha
        return params.ball_const * self.c ** (d - a) * self.k ** (-d) * beta_fn(d, a - d)

    def contains(self, rho: np.ndarray, w: np.ndarray) -> np.ndarray:
        return w > self.c + self.k * rho

    def to_dict(self) -> dict:
        return {"kind": "cone", "c": self.c, "k": self.k}


Window = BoxWindow | ConeWindow


@dataclass(frozen=True)
class PointPattern:
    """Immutable point set; ``x`` has shape ``(n, d)``."""

    params: ModelParams
    x: np.ndarray
    y: np.ndarray
    window: Window
    seed: int

    def __post_init__(self):
        self.x.setflags(write=False)
        self.y.setflags(write=False)

    @property
    def rho(self) -> np.ndarray:
        return np.abs(self.x).sum(axis=1)

    @property
    def w(self) -> np.ndarray:
        return self.y + self.params.q * self.rho

    def __len__(self) -> int:
        return len(self.y)

    def to_rows(self) -> list:
        return [list(map(float, xi)) + [float(yi)] for xi, yi in zip(self.x, self.y)]


# -- region masses ------------------------------------------------------------


def nu_region_mass(params: ModelParams, theta: float, r: float, y: float) -> float:
    """``nu(D_theta(r, y))`` in closed form."""
    if not y > 0:
        raise DomainError(f"nu_region_mass needs y > 0, got {y}")
    if theta < 0 or r < 0:
        raise DomainError("need theta >= 0 and r >= 0")
    v = y / (y + params.q * r)
    return params.theta_const * y ** (params.d - params.alpha) * inv_phi_weight(params, theta, v)


def cone_mass(params: ModelParams, c: float, k: float) -> float:
    return ConeWindow(c, k).mass(params)


# -- sampling -----------------------------------------------------------------


def _l1_directions(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """Uniform points on the unit l1 sphere."""
    e = rng.exponential(size=(n, d))
    e /= e.sum(axis=1, keepdims=True)
    signs = rng.integers(0, 2, size=(n, d)) * 2 - 1
    return e * signs


def _sample_radial(params: ModelParams, window: Window, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Radii ``|x|`` and heights ``w`` of a Poisson sample on the window."""
    d, a = params.d, params.alpha
    n = rng.poisson(window.mass(params))
    if isinstance(window, BoxWindow):
        rho = window.L * rng.random(n) ** (1.0 / d)
        w = window.u_min * (1.0 - rng.random(n)) ** (-1.0 / a)
    else:
        v = rng.beta(a - d, d, size=n)
        rho = window.c / window.k * (1.0 / v - 1.0)
        w = (window.c + window.k * rho) * (1.0 - rng.random(n)) ** (-1.0 / a)
    return rho, w


def sample_pattern(params: ModelParams, window: Window, seed: int) -> PointPattern:
    """Exact Poisson sample of the limit process restricted to ``window``."""
    rng = prf.rng_from(seed, DOM_PATTERN, *_window_words(window))
    rho, w = _sample_radial(params, window, rng)
    x = _l1_directions(rng, len(rho), params.d) * rho[:, None]
    rho = np.abs(x).sum(axis=1)
    return PointPattern(params, x, w - params.q * rho, window, int(seed))


def _window_words(window: Window) -> tuple:
    vals = (window.L, window.u_min) if isinstance(window, BoxWindow) else (window.c, window.k)
    kind = 1 if isinstance(window, BoxWindow) else 2
    return (kind,) + tuple(int(np.float64(v).view(np.uint64)) for v in vals)


def window_contains(outer: Window, inner: Window) -> bool:
    if type(outer) is not type(inner):
        return False
    if isinstance(outer, BoxWindow):
        return outer.L >= inner.L and outer.u_min <= inner.u_min
    return outer.c <= inner.c and outer.k <= inner.k


def extend_pattern(pattern: PointPattern, window: Window) -> PointPattern:
    """Enlarge to ``window``, keeping every existing point and sampling only the shell."""
    if not window_contains(window, pattern.window):
        raise DomainError("the new window must contain the old one")
    fresh = sample_pattern(pattern.params, window, prf.derive_key(pattern.seed, DOM_SHELL, *_window_words(window)))
    keep = ~pattern.window.contains(fresh.rho, fresh.w)
    x = np.concatenate([pattern.x, fresh.x[keep]])
    y = np.concatenate([pattern.y, fresh.y[keep]])
    return PointPattern(pattern.params, x, y, window, pattern.seed)


# -- cone functionals ---------------------------------------------------------


def _scores(pattern: PointPattern, t: float) -> np.ndarray:
    return pattern.w - pattern.params.q / t * pattern.rho


def _best(scores: np.ndarray, rho: np.ndarray) -> int:
    m = scores.max()
    hits = np.flatnonzero(scores == m)
    if len(hits) == 1:
        return int(hits[0])
    return int(hits[np.argmax(rho[hits])])


def cone_argmax(pattern: PointPattern, t: float) -> tuple[int, float]:
    """Index of the point touched first by the lowering cone, and the tip value."""
    if len(pattern) == 0:
        raise DomainError("cone_argmax on an empty pattern")
    if not t > 0:
        raise DomainError(f"t must be positive, got {t}")
    s = _scores(pattern, t)
    i = _best(s, pattern.rho)
    return i, float(s[i])


@dataclass(frozen=True)
class ConePath:
    """Piecewise-constant right-continuous maximizer; segments are ``(t_start, t_end, index)``."""

    segments: tuple
    t_range: tuple

    def index_at(self, t: float) -> int:
        lo, hi = self.t_range
        if not lo <= t <= hi:
            raise DomainError(f"t={t} outside [{lo}, {hi}]")
        for a, b, i in self.segments:
            if a <= t < b:
                return i
        return self.segments[-1][2]

    def jump_times(self) -> list:
        return [seg[0] for seg in self.segments[1:]]


def cone_path(pattern: PointPattern, t_lo: float, t_hi: float) -> ConePath:
    """Event-driven sweep of the cone maximizer over ``[t_lo, t_hi]``."""
    if not 0 < t_lo <= t_hi:
        raise DomainError("need 0 < t_lo <= t_hi")
    q = pattern.params.q
    rho, w = pattern.rho, pattern.w
    cur, _ = cone_argmax(pattern, t_lo)
    t = t_lo
    segments = []
    while True:
        cand = np.flatnonzero((rho > rho[cur]) & (w > w[cur]))
        nxt = None
        if len(cand):
            times = q * (rho[cand] - rho[cur]) / (w[cand] - w[cur])
            ok = times > t
            if ok.any():
                cand, times = cand[ok], times[ok]
                tmin = times.min()
                if tmin <= t_hi:
                    tied = cand[times == tmin]
                    nxt = (float(tmin), int(tied[np.argmax(rho[tied])]))
        if nxt is None:
            segments.append((t, t_hi, cur))
            break
        segments.append((t, nxt[0], cur))
        t, cur = nxt
    return ConePath(tuple(segments), (t_lo, t_hi))


def tip_process(path: ConePath, pattern: PointPattern, times: Sequence[float]) -> np.ndarray:
    """Tip value ``Y2 + q(1 - 1/t)|Y1|`` along the path."""
    q = pattern.params.q
    out = []
    for t in times:
        i = path.index_at(t)
        out.append(pattern.y[i] + q * (1.0 - 1.0 / t) * pattern.rho[i])
    return np.array(out)


# -- truncation ---------------------------------------------------------------


def truncation_mass(params: ModelParams, window: Window, s_star: float, t_hi: float) -> float:
    """``nu`` of the excluded points with ``w - (q/t_hi)|x| > s_star``."""
    d, a, q = params.d, params.alpha, params.q
    if not s_star > 0:
        return math.inf
    k = q / t_hi
    g = lambda r: s_star + k * r
    cd = params.ball_const
    if isinstance(window, BoxWindow):
        L, u = window.L, window.u_min
        inner = 0.0
        # inside the window only w < u_min is excluded
        r_cut = min(L, (u - s_star) / k) if u > s_star else 0.0
        if r_cut > 0:
            inner, _ = integrate.quad(lambda r: r ** (d - 1) * (g(r) ** -a - u ** -a), 0.0, r_cut,
                                      epsabs=0.0, epsrel=1e-10, limit=200)
        # closed form of the radial tail beyond L
        v0 = s_star / g(L)
        outer = s_star ** (d - a) * k ** (-d) * beta_fn(a - d, d) * special.betainc(a - d, d, v0)
        return cd * (inner + outer)
    c, kw = window.c, window.k
    f = lambda r: r ** (d - 1) * max(g(r) ** -a - (c + kw * r) ** -a, 0.0)
    if s_star >= c and k >= kw:
        return 0.0
    total, _ = integrate.quad(f, 0.0, np.inf, epsabs=0.0, epsrel=1e-10, limit=400)
    return cd * total


def truncation_bound(params: ModelParams, pattern: PointPattern, window: Window | None,
                     t_lo: float, t_hi: float) -> float:
    """Poisson-void bound on the chance that points outside the window change the cone path."""
    window = window or pattern.window
    if len(pattern) == 0:
        return math.inf
    _, s_star = cone_argmax(pattern, t_lo)
    return truncation_mass(params, window, s_star, t_hi)


def adaptive_pattern(params: ModelParams, t_lo: float, t_hi: float, seed: int,
                     tol: float = 1e-6, c0: float | None = None) -> PointPattern:
    """Pattern on a cone window grown by shells until the truncation bound is below ``tol``."""
    k = params.q / t_hi
    c = c0 if c0 is not None else _default_c(params)
    pat = sample_pattern(params, ConeWindow(c, k), seed)
    for _ in range(200):
        if len(pat) and truncation_bound(params, pat, None, t_lo, t_hi) < tol:
            return pat
        c *= 0.5
        pat = extend_pattern(pat, ConeWindow(c, k))
    raise DomainError("adaptive window did not converge")


def _default_c(params: ModelParams, log_fail: float = 4.6) -> float:
    """Cone offset with ``P(max y <= c) = exp(-log_fail)``."""
    return (params.theta_const / log_fail) ** (1.0 / (params.alpha - params.d))


# -- batched persistence ------------------------------------------------------


def _batch_radial(params: ModelParams, c: float, k: float, n_patterns: int,
                  rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d, a = params.d, params.alpha
    counts = rng.poisson(ConeWindow(c, k).mass(params), size=n_patterns)
    n = int(counts.sum())
    v = rng.beta(a - d, d, size=n)
    rho = c / k * (1.0 / v - 1.0)
    w = (c + k * rho) * (1.0 - rng.random(n)) ** (-1.0 / a)
    owner = np.repeat(np.arange(n_patterns), counts)
    return owner, rho, w


def _extend_radial(params: ModelParams, rho: np.ndarray, w: np.ndarray, c: float, k: float,
                   rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Halve the cone offset until the highest point clears it, adding only new shells."""
    q = params.q
    while not (len(w) and (w - q * rho).max() > c):
        c_new = 0.5 * c
        _, r_new, w_new = _batch_radial(params, c_new, k, 1, rng)
        keep = ~(w_new > c + k * r_new)
        rho = np.concatenate([rho, r_new[keep]])
        w = np.concatenate([w, w_new[keep]])
        c = c_new
    return rho, w


def _group_argmax(owner: np.ndarray, score: np.ndarray, n_groups: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-group maximum and the index attaining it (``-1`` for empty groups)."""
    best = np.full(n_groups, -np.inf)
    np.maximum.at(best, owner, score)
    hit = score == best[owner]
    idx = np.full(n_groups, -1, dtype=np.int64)
    # later points overwrite earlier ones; ties have probability zero
    idx[owner[hit]] = np.flatnonzero(hit)
    return best, idx


def persistence_batch(params: ModelParams, thetas: Sequence[float], n_patterns: int, seed: int,
                      chunk: int = 20_000) -> dict:
    """Fraction of patterns whose maximizer at ``t = 1`` is still the maximizer at ``1 + theta``.

    All thetas share the same patterns. Patterns whose highest point lies below
    the cone offset are resampled on a larger window, so every answer is exact.
    """
    thetas = [float(th) for th in thetas]
    t_hi = 1.0 + max(thetas)
    k = params.q / t_hi
    c = _default_c(params)
    q = params.q
    hits = np.zeros(len(thetas), dtype=np.int64)
    fixes = 0
    done = 0
    for b in range(0, n_patterns, chunk):
        m = min(chunk, n_patterns - b)
        rng = prf.rng_from(seed, DOM_BATCH, b)
        owner, rho, w = _batch_radial(params, c, k, m, rng)
        s1, i1 = _group_argmax(owner, w - q * rho, m)
        same = np.zeros((len(thetas), m), dtype=bool)
        for j, th in enumerate(thetas):
            _, it = _group_argmax(owner, w - q / (1.0 + th) * rho, m)
            same[j] = (it == i1) & (i1 >= 0)
        order = np.argsort(owner, kind="stable")
        starts = np.searchsorted(owner[order], np.arange(m + 1))
        for g in np.flatnonzero(~(s1 > c)):
            # highest point not certified: grow this same pattern by cone shells
            sel = order[starts[g]:starts[g + 1]]
            g_rho, g_w = _extend_radial(params, rho[sel], w[sel], c, k,
                                        prf.rng_from(seed, DOM_SHELL, b, int(g)))
            i_ref = int(np.argmax(g_w - q * g_rho))
            for j, th in enumerate(thetas):
                same[j, g] = int(np.argmax(g_w - q / (1.0 + th) * g_rho)) == i_ref
            fixes += 1
        hits += same.sum(axis=1)
        done += m
    p = hits / done
    return {
        "thetas": thetas,
        "persistence": p.tolist(),
        "stderr": np.sqrt(p * (1 - p) / done).tolist(),
        "n_patterns": done,
        "resampled": fixes,
        "truncation_bound": 0.0,
    }


# -- limit marginals at t = 1 -------------------------------------------------


def top_height_cdf(params: ModelParams, u: np.ndarray) -> np.ndarray:
    """CDF of the height of the highest point: ``exp(-theta_const u^(d-alpha))``."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-params.theta_const * u[pos] ** (params.d - params.alpha))
    return out


def top_radius_cdf(params: ModelParams, r: np.ndarray) -> np.ndarray:
    """CDF of ``|x|`` of the highest point.

    Given height ``y`` the radius has density proportional to
    ``r^(d-1) (y + q r)^(-alpha-1)``, i.e. ``v = y/(y + q r)`` is Beta(alpha+1-d, d).
    """
    d, a, q = params.d, params.alpha, params.q
    r = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.empty_like(r)
    dens = lambda y: params.theta_const * (a - d) * y ** (d - a - 1) * math.exp(-params.theta_const * y ** (d - a))
    for j, rr in enumerate(r):
        if rr <= 0:
            out[j] = 0.0
            continue
        g = lambda y: dens(y) * special.betaincc(a + 1 - d, d, y / (y + q * rr))
        # split at the mode of the height density
        mode = (params.theta_const * (a - d) / (a - d + 1)) ** (1.0 / (a - d))
        v1, _ = integrate.quad(g, 0.0, mode, limit=200)
        v2, _ = integrate.quad(g, mode, np.inf, limit=200)
        out[j] = v1 + v2
    return out


def sample_top_point(params: ModelParams, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact draws of ``(|Y1|, Y2)`` at ``t = 1``."""
    d, a, q = params.d, params.alpha, params.q
    rng = prf.rng_from(seed, DOM_PATTERN, 0x70)
    e = rng.exponential(size=n)
    y = (e / params.theta_const) ** (-1.0 / (a - d))
    v = rng.beta(a + 1 - d, d, size=n)
    rho = y / q * (1.0 / v - 1.0)
    return rho, y
