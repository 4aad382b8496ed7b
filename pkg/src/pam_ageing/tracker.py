"""Event-driven tracking of the maximizer of ``phi_t`` and its runners-up.

Between gate activations ``phi_t(x) - phi_t(y) = A - B/t`` with
``A = xi(x) - xi(y)`` and ``B = |x| log xi(x) - |y| log xi(y) - eta(x) + eta(y)``,
so every overtaking time is a closed-form crossing. Only sites with a larger
potential than the current leader can overtake it.

Candidate sets come from threshold queries on the potential field. Every site
satisfies ``phi_s(z) <= max(xi(z), d)`` for all ``s``, so once the leader's value
exceeds a threshold ``T >= d`` no site with ``xi <= T`` can ever catch up; the
remaining risk is spatial. Since ``phi_s`` is nondecreasing in ``s`` for
``xi > d`` and ``eta(z) <= |z| log d``, a site at distance ``r`` can only climb
above a level ``L`` before time ``H`` if ``xi - (r/H) log(xi/d) > L`` and
``H xi >= r``. Beyond a modest inner ball that radius-dependent threshold is
queried directly, out to a radius where the expected number of missed sites is
below ``TAIL_TOL`` (or a hard cap, reported as ``tail_bound``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .analytics import ModelParams, eta_array, scale_a, scale_r
from .errors import DomainError, ResourceError
from .potential import PotentialSpec, ball_site_count


@dataclass(frozen=True)
class TrackerConfig:
    k_runners: int = 3
    radius_factor: float = 3.0
    radius_eps: float = 0.25
    horizon_factor: float = 4.0
    min_radius: int = 8
    beta: float | None = None

    def radius(self, params: ModelParams, t: float) -> int:
        """Inner search radius ``K r_t (log t)^(1/(alpha-d) + eps)``; the far field is certified separately."""
        tt = max(t, math.e)
        r = scale_r(params, tt)
        expo = 1.0 / (params.alpha - params.d) + self.radius_eps
        return max(self.min_radius, int(math.ceil(self.radius_factor * r * math.log(tt) ** expo)))

    def beta_for(self, params: ModelParams) -> float:
        if self.beta is not None:
            return self.beta
        return 1.0 + 1.0 / (params.alpha - params.d) + 0.1

    def to_dict(self) -> dict:
        return {
            "k_runners": self.k_runners,
            "radius_factor": self.radius_factor,
            "radius_eps": self.radius_eps,
            "horizon_factor": self.horizon_factor,
            "min_radius": self.min_radius,
            "beta": self.beta,
        }


@dataclass(frozen=True)
class Entry:
    site: tuple
    xi: float
    phi: float


@dataclass(frozen=True)
class TrackerState:
    t: float
    leader: Entry
    runners: tuple
    search_radius: int
    horizon: float


@dataclass(frozen=True)
class JumpRecord:
    tau: float
    from_site: tuple
    to_site: tuple
    xi_from: float
    xi_to: float
    gap_before: float


def crossing_time(x: tuple, y: tuple) -> float | None:
    """Time at which ``phi_t(x) = phi_t(y)``, ignoring gates.

    ``x`` and ``y`` are ``(site, xi)`` pairs. Returns ``None`` when the potentials
    agree or the crossing would be at a nonpositive time.
    """
    (sx, xx), (sy, xy) = x, y
    if tuple(sx) == tuple(sy):
        raise DomainError("crossing_time needs two distinct sites")
    a = xx - xy
    if a == 0:
        return None
    ax = np.abs(np.asarray([sx, sy], dtype=np.int64))
    nx, ny = ax.sum(axis=1)
    ex, ey = eta_array(ax)
    b = nx * math.log(xx) - ny * math.log(xy) - ex + ey
    t = b / a
    return t if t > 0 else None

TAIL_TOL = 1e-12
BACKGROUND_BALL = 20_000


def _far_radius(params: ModelParams, horizon: float, top: int) -> tuple[int, float]:
    """Outer radius of the far-field search and the expected number of missed sites.

    A site at distance ``r`` can only enter by time ``horizon`` if ``xi > r/horizon``,
    so the expected number of relevant sites beyond ``R`` is at most
    ``c_d horizon**alpha R**(d-alpha) / (alpha-d)``.
    """
    d, alpha = params.d, params.alpha
    c = params.ball_const * horizon ** alpha / (alpha - d)
    r = (c / TAIL_TOL) ** (1.0 / (alpha - d))
    cap = float(1 << 60) if d == 1 else float((1 << top) * 16)
    r = min(r, cap)
    return int(r), c * r ** (d - alpha)


def _window_level(cand: "_Candidates", t: float, horizon: float, need: int) -> float:
    """Lower bound for the ``need``-th largest value on ``[t, horizon]``.

    ``phi_s`` of a fixed site is monotone between gate activation and ``horizon``,
    so its minimum over the window is ``min(phi_t, phi_horizon)``.
    """
    if len(cand) < need:
        return 0.0
    low = np.minimum(cand.phi(t), cand.phi(horizon))
    return float(np.partition(low, len(low) - need)[len(low) - need])


class _FarLevel:
    """Potential a site at distance ``r`` needs to climb above ``level`` before ``horizon``.

    With ``eta(z) <= |z| log d`` and the gate ``s >= r/xi``, the largest value a
    site can reach on ``[0, horizon]`` is ``xi (1 + log(d/xi))`` when ``xi < d``
    and ``xi - (r/horizon) log(xi/d)`` otherwise. Both branches increase in
    ``xi`` on the gated range ``xi >= r/horizon``, so the answer is a threshold.
    """

    def __init__(self, level: float, horizon: float, d: int):
        self.level, self.horizon, self.d = level, horizon, d
        self._memo: dict = {}

    def reach(self, x: float, c: float) -> float:
        if x < self.d:
            return x * (1.0 + math.log(self.d / x))
        return x - c * math.log(x / self.d)

    def __call__(self, r: int) -> float:
        hit = self._memo.get(r)
        if hit is not None:
            return hit
        c = r / self.horizon
        x0 = max(c, 1.0)
        if self.reach(x0, c) > self.level:
            # every gated site counts; step below x0 so that xi == x0 is kept
            out = math.nextafter(x0, -math.inf)
        else:
            g = lambda x: self.reach(x, c) - self.level
            hi = max(x0, self.level) + max(1.0, c)
            while g(hi) <= 0:
                hi = x0 + 2.0 * (hi - x0)
            out = brentq(g, x0, hi, xtol=1e-12, rtol=1e-14)
        self._memo[r] = out
        return out


class _Candidates:
    """Flat arrays describing one certified candidate set."""

    def __init__(self, coords: np.ndarray, xi: np.ndarray):
        self.coords = coords
        self.xi = xi
        self.norm = np.abs(coords).sum(axis=1).astype(np.float64)
        self.eta = eta_array(np.abs(coords))
        self.b = self.norm * np.log(xi) - self.eta
        self.gate = self.norm / xi
        self._index = None

    def __len__(self):
        return len(self.xi)

    def phi(self, t: float) -> np.ndarray:
        return np.where(t * self.xi >= self.norm, self.xi - self.b / t, 0.0)

    def index(self, site: tuple) -> int | None:
        if self._index is None:
            self._index = {tuple(c): i for i, c in enumerate(self.coords.tolist())}
        return self._index.get(tuple(site))

    def site(self, i: int) -> tuple:
        return tuple(int(c) for c in self.coords[i])

    def ranked(self, t: float) -> np.ndarray:
        """Candidate indices by phi_t descending, ties: larger xi, larger |z|, lexicographic."""
        ph = self.phi(t)
        keys = [self.coords[:, j] for j in range(self.coords.shape[1] - 1, -1, -1)]
        keys += [-self.norm, -self.xi, -ph]
        return np.lexsort(keys)


class Tracker:
    """Single-writer tracker of ``(Z_t^(1), ..., Z_t^(k))`` started at ``t0``."""

    def __init__(self, spec: PotentialSpec, t0: float, config: TrackerConfig | None = None):
        if not t0 > 0:
            raise DomainError(f"tracker start time must be positive, got {t0}")
        self.spec = spec
        self.params = spec.params
        self.config = config or TrackerConfig()
        self.t = float(t0)
        self.t_start = float(t0)
        self.jumps: list[JumpRecord] = []
        self.rescans = 0
        self.max_radius = 0
        self.uncertified_switches = 0
        self.far_sites = 0
        self.tail_bound = 0.0
        self._scan(self.t, need=self.config.k_runners)
        order = self._cand.ranked(self.t)
        self.leader = int(order[0])
        self.initial_site = self._cand.site(self.leader)

    # -- candidate management -------------------------------------------------

    def _scan(self, t: float, need: int) -> None:
        """Certify a candidate set for ``[t, horizon_factor * t]``."""
        cfg, params = self.config, self.params
        horizon = cfg.horizon_factor * t
        radius = cfg.radius(params, t)
        d = params.d
        if self.spec.background is not None:
            self._scan_background(t, need, horizon, radius)
            return
        thr = max(scale_a(params, t) if t > math.e else float(d), float(d))
        while True:
            if thr < d:
                # dense fallback: every site of the ball
                if ball_site_count(d, radius) > self.spec.site_budget:
                    raise ResourceError(
                        f"dense scan of radius {radius} exceeds site budget {self.spec.site_budget}"
                    )
                coords, vals = self.spec.dense_ball(radius)
                thr = 0.0
            else:
                coords, vals = self.spec.exceedances(radius, thr)
            cand = _Candidates(coords, vals)
            level = _window_level(cand, t, horizon, need)
            # excluded inner sites never exceed max(xi, d) <= thr
            if thr == 0.0 or level > thr:
                break
            thr = max(float(d), thr / 2.0) if thr > d else -1.0
        self._finish_scan(cand, level, thr, need, radius, horizon)

    def _finish_scan(self, cand: "_Candidates", level: float, thr: float, need: int,
                     radius: int, horizon: float) -> None:
        """Add the certified far field beyond ``radius`` and install the candidate set."""
        params, d = self.params, self.params.d
        r_far, tail = _far_radius(params, horizon, self.spec.top)
        far_level = _FarLevel(level, horizon, d)
        far_c, far_v = self.spec.exceedances_profile(radius, r_far, far_level)
        f_edge = far_level(r_far)
        if f_edge > max(r_far / horizon, 1.0) * (1.0 + 1e-12):
            # beyond the edge the threshold is at least (r/H) log(f_edge/d)
            tail *= max(1.0, math.log(f_edge / d)) ** (-params.alpha)
        if len(far_v):
            cand = _Candidates(np.concatenate([cand.coords, far_c]),
                               np.concatenate([cand.xi, far_v]))
        self.far_sites += len(far_v)
        self.tail_bound = tail
        self._cand = cand
        self._need = need
        self.threshold = thr
        self.radius = radius
        self.horizon = horizon
        self.max_radius = max(self.max_radius, radius)
        self.rescans += 1

    def _scan_background(self, t: float, need: int, horizon: float, radius: int) -> None:
        """Scan of a hand-built field whose non-overridden sites share one value ``b``.

        Such a site never climbs above ``b (1 + log(d/b))`` for ``b < d`` and
        ``b`` otherwise, so once the leader stays above that cap on the window the
        leader is certified. Runners-up that carry the background value are
        interchangeable; they are reported from a small dense ball.
        """
        d, b = self.params.d, float(self.spec.background)
        cap = b * (1.0 + math.log(d / b)) if b < d else b
        small = radius
        while small > 0 and ball_site_count(d, small) > BACKGROUND_BALL:
            small //= 2
        coords, vals = self.spec.dense_ball(small)
        ov = [(c, v) for c, v in self.spec.overrides.items() if sum(abs(x) for x in c) > small]
        if ov:
            coords = np.concatenate([coords, np.array([c for c, _ in ov], dtype=np.int64)])
            vals = np.concatenate([vals, np.array([v for _, v in ov])])
        cand = _Candidates(coords, vals)
        level = _window_level(cand, t, horizon, 1)
        if not level > cap:
            if ball_site_count(d, radius) > self.spec.site_budget:
                raise ResourceError(
                    f"background field: dense scan of radius {radius} exceeds site budget {self.spec.site_budget}"
                )
            coords, vals = self.spec.dense_ball(radius)
            cand = _Candidates(coords, vals)
            level = _window_level(cand, t, horizon, need)
            small = radius
        self._finish_scan(cand, level, cap, need, small, horizon)

    def _rescan(self, t: float) -> None:
        old = self._cand.site(self.leader)
        self._scan(t, need=self._need)
        self.leader = int(self._cand.ranked(t)[0])
        if self._cand.site(self.leader) != old:
            # a site outside the previous ball took over unseen
            self.uncertified_switches += 1

    # -- dynamics ---------------------------------------------------------------

    def _next_overtake(self, t_now: float) -> tuple[float, int] | None:
        c = self._cand
        i = self.leader
        higher = np.nonzero(c.xi > c.xi[i])[0]
        if len(higher) == 0:
            return None
        a = c.xi[higher] - c.xi[i]
        bd = c.b[higher] - c.b[i]
        cross = bd / a
        times = np.maximum(cross, c.gate[higher])
        times = np.where(times < t_now, t_now, times)
        tmin = times.min()
        tied = higher[times == tmin]
        if len(tied) > 1:
            # right-continuity: the largest potential leads immediately after
            tied = tied[np.argsort(-c.xi[tied], kind="stable")]
        return float(tmin), int(tied[0])

    def _gap_at(self, t: float, exclude: int) -> float:
        c = self._cand
        ph = c.phi(t)
        active = c.gate < t
        active[exclude] = False
        if not active.any():
            return float(ph[exclude])
        # the leader dominates on the open interval before the jump
        return max(0.0, float(ph[exclude] - ph[active].max()))

    def _run_window(self, t_end: float) -> list[JumpRecord]:
        found = []
        while True:
            nxt = self._next_overtake(self.t)
            if nxt is None or nxt[0] > t_end:
                break
            tau, j = nxt
            c = self._cand
            i = self.leader
            rec = JumpRecord(
                tau=tau,
                from_site=c.site(i),
                to_site=c.site(j),
                xi_from=float(c.xi[i]),
                xi_to=float(c.xi[j]),
                gap_before=self._gap_at(tau, i),
            )
            found.append(rec)
            self.leader = j
            self.t = tau
        self.t = t_end
        return found

    def advance(self, t_target: float) -> tuple[TrackerState, list[JumpRecord]]:
        """Move to ``t_target``; returns the new state and the jumps in ``(t, t_target]``."""
        if t_target < self.t:
            raise DomainError(f"cannot advance backwards from {self.t} to {t_target}")
        new = []
        while self.t < t_target:
            if self.t >= self.horizon:
                self._rescan(self.t)
            new.extend(self._run_window(min(self.horizon, t_target)))
        self.jumps.extend(new)
        return self.state(), new

    def next_jump(self, t_max: float) -> JumpRecord | None:
        """Advance until the first jump after the current time, or to ``t_max``."""
        while self.t < t_max:
            if self.t >= self.horizon:
                self._rescan(self.t)
            nxt = self._next_overtake(self.t)
            end = min(self.horizon, t_max)
            if nxt is not None and nxt[0] <= end:
                rec = self._run_window(nxt[0])
                if rec:
                    self.jumps.extend(rec)
                    return rec[-1]
            else:
                self._run_window(end)
        return None

    # -- observation ------------------------------------------------------------

    def _ensure_runners(self, k: int) -> None:
        if k <= self._need:
            return
        leader_site = self._cand.site(self.leader)
        self._scan(self.t, need=k)
        idx = self._cand.index(leader_site)
        if idx is None:
            raise ResourceError("leader fell outside the rescanned ball")
        self.leader = idx

    def top(self, k: int | None = None) -> list[Entry]:
        """Leader followed by runners-up at the current time."""
        k = k or self.config.k_runners
        self._ensure_runners(k)
        c = self._cand
        ph = c.phi(self.t)
        order = [i for i in c.ranked(self.t)[: k + 1].tolist() if i != self.leader]
        rows = [self.leader] + order[: k - 1]
        return [Entry(c.site(i), float(c.xi[i]), float(ph[i])) for i in rows]

    def state(self) -> TrackerState:
        rows = self.top()
        return TrackerState(
            t=self.t,
            leader=rows[0],
            runners=tuple(rows[1:]),
            search_radius=self.radius,
            horizon=self.horizon,
        )

    def path(self) -> "TrackedPath":
        return TrackedPath(
            t_start=self.t_start,
            t_end=self.t,
            initial_site=self.initial_site,
            jumps=tuple(self.jumps),
        )

    def describe(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "max_radius": self.max_radius,
            "rescans": self.rescans,
            "uncertified_switches": self.uncertified_switches,
            "far_sites": self.far_sites,
            "tail_bound": self.tail_bound,
        }


@dataclass(frozen=True)
class TrackedPath:
    """Right-continuous leader path on ``[t_start, t_end]``."""

    t_start: float
    t_end: float
    initial_site: tuple
    jumps: tuple

    def leader_at(self, t: float) -> tuple:
        if not self.t_start <= t <= self.t_end:
            raise DomainError(f"t={t} outside tracked range [{self.t_start}, {self.t_end}]")
        site = self.initial_site
        for j in self.jumps:
            if j.tau <= t:
                site = j.to_site
            else:
                break
        return site

    def jump_times(self) -> np.ndarray:
        return np.array([j.tau for j in self.jumps])


@dataclass(frozen=True)
class Residual:
    value: float
    censored: bool


def residual_lifetime_V(path: TrackedPath | Tracker, t: float) -> Residual:
    """Time from ``t`` to the first jump strictly after ``t``.

    On a jump-free suffix the distance to the end of the tracked range is a
    lower bound and is returned with ``censored=True``.
    """
    if isinstance(path, Tracker):
        path = path.path()
    if not path.t_start <= t <= path.t_end:
        raise DomainError(f"t={t} outside tracked range")
    for j in path.jumps:
        if j.tau > t:
            return Residual(j.tau - t, False)
    return Residual(path.t_end - t, True)


def separation_gap(state: TrackerState, params: ModelParams, beta: float | None = None) -> tuple[float, float]:
    """Gap ``phi(Z1) - phi(Z2)`` and the threshold ``a_t (log t)^-beta / 2``."""
    if not state.runners:
        raise DomainError("separation gap needs at least two ranked sites")
    if beta is None:
        beta = TrackerConfig().beta_for(params)
    gap = state.leader.phi - state.runners[0].phi
    thr = 0.5 * scale_a(params, state.t) * math.log(state.t) ** (-beta)
    return gap, thr


@dataclass(frozen=True)
class Decomposition:
    lhs: float
    rhs: float
    error: float


def decomposition_diagnostics(
    params: ModelParams, t: float, theta: float, site: Sequence[int], xi_value: float
) -> tuple[Decomposition, Decomposition]:
    """Both sides of the two first-order expansions of ``phi`` on the ``(r_t, a_t)`` scale.

    First: ``phi_{t(1+theta)}(z)/a_t`` against ``phi_t(z)/a_t + theta/(1+theta) q |z|/r_t``.
    Second: ``xi(z)/a_t`` against ``phi_t(z)/a_t + q |z|/r_t``.
    """
    n = sum(abs(int(c)) for c in site)
    if t * xi_value < n or (1 + theta) * t * xi_value < n:
        raise DomainError("gate t*xi >= |z| fails")
    from .analytics import phi

    a, r, q = scale_a(params, t), scale_r(params, t), params.q
    p_t = phi(params, t, site, xi_value)
    p_s = phi(params, (1 + theta) * t, site, xi_value)
    rhs1 = p_t / a + theta / (1 + theta) * q * n / r
    first = Decomposition(p_s / a, rhs1, p_s / a - rhs1)
    rhs2 = p_t / a + q * n / r
    second = Decomposition(xi_value / a, rhs2, xi_value / a - rhs2)
    return first, second
