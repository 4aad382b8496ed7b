"""Explicit solver for ``du/dt = (Delta + xi) u`` from a point mass at the origin.

The solution grows superexponentially, so the state keeps the normalized
profile ``v = u / U`` together with ``log U``. Each step applies one classical
Runge-Kutta step of the linear generator (Dirichlet-zero outside a cube) to
``v`` and renormalizes; the logarithm of the normalizer is added to ``log U``.
On the truncated box this is exactly the linear flow, including the mass that
leaks through the boundary, which the leak monitor turns into box growth.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import DomainError, ResourceError, StabilityError
from .potential import PotentialSpec


@dataclass(frozen=True)
class SolverConfig:
    dt_factor: float = 0.025          # accuracy step dt = dt_factor / (xi_max + 4d)
    stability_c: float = 2.5          # hard bound dt <= c / (xi_max + 4d)
    first_dt_factor: float = 1e-3     # first step, then geometric ramp
    ramp: float = 1.5
    leak_tol: float = 1e-10
    initial_radius: int = 8
    growth: float = 1.5
    fixed_box: bool = False
    site_budget: int = 4_000_000
    cover: bool = True                # start on a box holding every variational maximizer up to t_end
    cover_factor: float = 1.5
    cover_pad: int = 8
    propagator_max_sites: int = 250_000  # cache the sparse RK4 step matrix up to this box size
    work_budget: float = 1e9          # largest estimated site-steps for a covered solve

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class ProfileState:
    t: float
    box_radius: int
    v: np.ndarray
    log_mass: float
    boundary_leak: float
    clamps: int = 0
    dt_hint: float = 0.0

    @property
    def d(self) -> int:
        return self.v.ndim

    def total(self) -> float:
        return float(self.v.sum())

    def coords_of(self, flat_index: int) -> tuple:
        idx = np.unravel_index(flat_index, self.v.shape)
        return tuple(int(i) - self.box_radius for i in idx)

    def value_at(self, site: Sequence[int]) -> float:
        idx = tuple(int(c) + self.box_radius for c in site)
        if any(i < 0 or i >= n for i, n in zip(idx, self.v.shape)):
            return 0.0
        return float(self.v[idx])

    def peak(self) -> tuple[tuple, float]:
        """Argmax of ``v``; exact ties go to larger l1 norm, then lexicographically smallest."""
        flat = self.v.ravel()
        m = flat.max()
        hits = np.flatnonzero(flat == m)
        if len(hits) == 1:
            return self.coords_of(int(hits[0])), float(m)
        sites = [self.coords_of(int(h)) for h in hits]
        sites.sort(key=lambda s: (-sum(abs(c) for c in s), s))
        return sites[0], float(m)


def point_mass(d: int, radius: int) -> ProfileState:
    v = np.zeros((2 * radius + 1,) * d)
    v[(radius,) * d] = 1.0
    return ProfileState(0.0, radius, v, 0.0, 0.0)


def apply_generator(w: np.ndarray, xi_box: np.ndarray) -> np.ndarray:
    """``(Delta + xi) w`` with zero values outside the array."""
    d = w.ndim
    out = (xi_box - 2.0 * d) * w
    for ax in range(d):
        lo = [slice(None)] * d
        hi = [slice(None)] * d
        lo[ax] = slice(0, -1)
        hi[ax] = slice(1, None)
        out[tuple(hi)] += w[tuple(lo)]
        out[tuple(lo)] += w[tuple(hi)]
    return out


def boundary_flux(v: np.ndarray) -> float:
    """Rate at which normalized mass leaves the cube: sum of v times outside neighbours."""
    if v.ndim == 1:
        return float(v[0] + v[-1])
    total = 0.0
    for ax in range(v.ndim):
        total += float(np.take(v, 0, axis=ax).sum() + np.take(v, -1, axis=ax).sum())
    return total


def stability_bound(xi_box: np.ndarray, c: float) -> float:
    return c / (float(xi_box.max()) + 4.0 * xi_box.ndim)


def generator_matrix(xi_box: np.ndarray) -> sparse.csr_matrix:
    """Sparse ``Delta + xi`` on the cube (C order), zero outside."""
    shape = xi_box.shape
    mat = sparse.diags(xi_box.ravel() - 2.0 * xi_box.ndim)
    for ax, n in enumerate(shape):
        hop = sparse.diags([np.ones(n - 1), np.ones(n - 1)], [-1, 1])
        left = sparse.identity(int(np.prod(shape[:ax], dtype=np.int64)))
        right = sparse.identity(int(np.prod(shape[ax + 1:], dtype=np.int64)))
        mat = mat + sparse.kron(sparse.kron(left, hop), right)
    return sparse.csr_matrix(mat)


def rk4_propagator(xi_box: np.ndarray, dt: float) -> sparse.csr_matrix:
    """One RK4 step of a linear flow as a matrix: the degree-4 Taylor polynomial of ``dt A``."""
    a = generator_matrix(xi_box) * dt
    eye = sparse.identity(a.shape[0], format="csr")
    p = eye + a / 4.0
    p = eye + (a / 3.0) @ p
    p = eye + (a / 2.0) @ p
    return sparse.csr_matrix(eye + a @ p)


def _check_step(state: ProfileState, xi_box: np.ndarray, dt: float, stability_c: float) -> None:
    if xi_box.shape != state.v.shape:
        raise DomainError("potential box does not match the profile box")
    if not dt > 0:
        raise DomainError(f"dt must be positive, got {dt}")
    bound = stability_bound(xi_box, stability_c)
    if dt > bound:
        raise StabilityError(f"dt={dt} exceeds the stability bound {bound}")


def step(state: ProfileState, xi_box: np.ndarray, dt: float, stability_c: float = 2.5,
         shift: float = 0.0, propagator: sparse.csr_matrix | None = None) -> ProfileState:
    """One renormalized RK4 step of the linear flow.

    The step integrates ``Delta + xi - shift`` and adds ``shift * dt`` back to
    ``log U``; the profile is unchanged in exact arithmetic, but a shift near the
    top of the spectrum makes the RK4 error on the leading modes negligible.
    ``propagator`` is the cached :func:`rk4_propagator` of the shifted field and ``dt``;
    it gives the same update with one sparse product instead of four stencils.
    """
    _check_step(state, xi_box, dt, stability_c)
    w = state.v
    if propagator is not None:
        w = (propagator @ w.ravel()).reshape(w.shape)
    else:
        xs = xi_box - shift if shift else xi_box
        k1 = apply_generator(w, xs)
        k2 = apply_generator(w + 0.5 * dt * k1, xs)
        k3 = apply_generator(w + 0.5 * dt * k2, xs)
        k4 = apply_generator(w + dt * k3, xs)
        w = w + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    neg = w < 0
    clamps = state.clamps
    if neg.any():
        if w[neg].min() < -1e-12 * max(1.0, float(np.abs(w).max())):
            clamps += int(np.count_nonzero(w < -1e-12))
        w = np.where(neg, 0.0, w)
    s = float(w.sum())
    if not (s > 0 and math.isfinite(s)):
        raise StabilityError(f"profile mass became {s}")
    v = w / s
    return ProfileState(
        t=state.t + dt,
        box_radius=state.box_radius,
        v=v,
        log_mass=state.log_mass + math.log(s) + shift * dt,
        boundary_leak=boundary_flux(v),
        clamps=clamps,
        dt_hint=dt,
    )


def embed(state: ProfileState, radius: int) -> ProfileState:
    """Same profile on a larger cube."""
    if radius < state.box_radius:
        raise DomainError("embed only enlarges the box")
    d = state.d
    pad = radius - state.box_radius
    v = np.pad(state.v, [(pad, pad)] * d)
    return replace(state, box_radius=radius, v=v, boundary_leak=boundary_flux(v))


@dataclass
class Series:
    """Observed time series of a solve."""

    t: np.ndarray
    peak: np.ndarray        # (n, d) int64
    v_peak: np.ndarray
    log_mass: np.ndarray
    leak: np.ndarray
    t_end: float
    states: list | None = None

    def peak_site(self, k: int) -> tuple:
        return tuple(int(c) for c in self.peak[k])


class Solver:
    """Integrator bound to one potential field; single writer."""

    def __init__(self, spec: PotentialSpec, config: SolverConfig | None = None):
        self.spec = spec
        self.config = config or SolverConfig()
        self.d = spec.params.d
        self._xi_cache: dict[int, np.ndarray] = {}
        self._prop_cache: dict[tuple, sparse.csr_matrix] = {}
        self.growths = 0
        self.steps = 0

    def xi_box(self, radius: int) -> np.ndarray:
        hit = self._xi_cache.get(radius)
        if hit is None:
            if (2 * radius + 1) ** self.d > self.config.site_budget:
                raise ResourceError(
                    f"box of radius {radius} exceeds the solver budget {self.config.site_budget}"
                )
            hit = self.spec.box_values(radius)
            self._xi_cache = {radius: hit}
        return hit

    def initial_state(self) -> ProfileState:
        return point_mass(self.d, self.config.initial_radius)

    def cover_radius(self, t_end: float) -> int:
        """Half-width that holds every maximizer of the variational functional on ``[1, t_end]``.

        The leak monitor alone only reacts to mass that has already reached the
        boundary, so a distant site with a large potential would stay outside
        the box forever; the tracker finds those sites ahead of time.
        """
        from .tracker import Tracker

        cfg = self.config
        tr = Tracker(self.spec, 1.0)
        tr.advance(max(float(t_end), 1.0))
        sites = [tr.initial_site] + [j.to_site for j in tr.jumps]
        far = max(max(abs(c) for c in s) for s in sites)
        return max(cfg.initial_radius, int(math.ceil(cfg.cover_factor * far)) + cfg.cover_pad)

    def prepare(self, t_end: float) -> ProfileState:
        """Point mass on a box sized for integrating up to ``t_end``."""
        cfg = self.config
        if cfg.fixed_box or not cfg.cover:
            return self.initial_state()
        r = self.cover_radius(t_end)
        xi_box = self.xi_box(r)
        work = t_end * (float(xi_box.max()) + 4.0 * self.d) / cfg.dt_factor * xi_box.size
        if work > cfg.work_budget:
            raise ResourceError(
                f"solve to t={t_end:g} needs about {work:.3g} site-steps (box radius {r}, "
                f"xi_max {float(xi_box.max()):.4g}), over the budget {cfg.work_budget:.3g}"
            )
        return point_mass(self.d, r)

    def _propagator(self, radius: int, xi_box: np.ndarray, dt: float, shift: float) -> sparse.csr_matrix | None:
        key = (radius, dt, shift)
        hit = self._prop_cache.get(key)
        if hit is None:
            if xi_box.size > self.config.propagator_max_sites:
                return None
            hit = rk4_propagator(xi_box - shift, dt)
            self._prop_cache = {key: hit}
        return hit

    def _maybe_grow(self, state: ProfileState) -> ProfileState:
        cfg = self.config
        while not cfg.fixed_box and state.boundary_leak > cfg.leak_tol:
            new_r = int(math.ceil(state.box_radius * cfg.growth)) + 1
            self.xi_box(new_r)
            state = embed(state, new_r)
            self.growths += 1
        return state

    def evolve(self, state: ProfileState, t_target: float) -> ProfileState:
        """Integrate from ``state`` to exactly ``t_target``."""
        cfg = self.config
        if t_target < state.t:
            raise DomainError("cannot integrate backwards")
        state = self._maybe_grow(state)
        while state.t < t_target:
            xi_box = self.xi_box(state.box_radius)
            steady = cfg.dt_factor / (float(xi_box.max()) + 4.0 * self.d)
            if state.dt_hint > 0:
                dt = min(steady, state.dt_hint * cfg.ramp)
            else:
                dt = cfg.first_dt_factor / (float(xi_box.max()) + 4.0 * self.d)
            shift = float(xi_box.max()) - 2.0 * self.d
            remaining = t_target - state.t
            if remaining <= dt * (1.0 + 1e-9):
                # land exactly on the target, keeping the ramp of the regular step
                state = replace(step(state, xi_box, remaining, cfg.stability_c, shift),
                                t=t_target, dt_hint=dt)
            else:
                prop = self._propagator(state.box_radius, xi_box, dt, shift) if dt == steady else None
                state = step(state, xi_box, dt, cfg.stability_c, shift, prop)
            self.steps += 1
            state = self._maybe_grow(state)
        return state

    def run(self, t_end: float, schedule: Sequence[float], keep_states: bool = False) -> Series:
        """Solve to ``t_end``, observing at the (sorted) schedule times."""
        if not t_end > 0:
            raise DomainError(f"t_end must be positive, got {t_end}")
        times = sorted(float(s) for s in schedule if 0 < s <= t_end)
        if not times or times[-1] < t_end:
            times.append(float(t_end))
        state = self.prepare(t_end)
        rows_t, rows_x, rows_v, rows_m, rows_l, states = [], [], [], [], [], []
        for s in times:
            state = self.evolve(state, s)
            site, val = state.peak()
            rows_t.append(state.t)
            rows_x.append(site)
            rows_v.append(val)
            rows_m.append(state.log_mass)
            rows_l.append(state.boundary_leak)
            if keep_states:
                states.append(state)
        return Series(
            t=np.array(rows_t),
            peak=np.array(rows_x, dtype=np.int64).reshape(-1, self.d),
            v_peak=np.array(rows_v),
            log_mass=np.array(rows_m),
            leak=np.array(rows_l),
            t_end=float(t_end),
            states=states if keep_states else None,
        )


def solve(spec: PotentialSpec, t_end: float, schedule: Sequence[float],
          config: SolverConfig | None = None, keep_states: bool = False) -> Series:
    return Solver(spec, config).run(t_end, schedule, keep_states=keep_states)


@dataclass(frozen=True)
class ResidualX:
    value: float
    censored: bool
    refined: bool


def residual_lifetime_X(series: Series, t: float, solver: Solver | None = None,
                        rel_tol: float = 1e-3) -> ResidualX:
    """Time from ``t`` until the profile peak first moves.

    With stored states and a solver, the switch is located by bisection between
    the bracketing observer times to ``rel_tol`` relative accuracy.
    """
    ts = series.t
    if not ts[0] <= t <= series.t_end:
        raise DomainError(f"t={t} outside the observed range")
    k0 = int(np.searchsorted(ts, t, side="right")) - 1
    if k0 < 0:
        raise DomainError(f"t={t} precedes the first observation")
    x0 = series.peak_site(k0)
    for k in range(k0 + 1, len(ts)):
        if series.peak_site(k) != x0:
            lo, hi = ts[k - 1], ts[k]
            if solver is None or series.states is None:
                return ResidualX(hi - t, False, False)
            base = series.states[k - 1]
            while hi - lo > rel_tol * max(hi - t, 1e-300) and hi - lo > 1e-12:
                mid = 0.5 * (lo + hi)
                st = solver.evolve(base, mid)
                if st.peak()[0] == x0:
                    lo, base = mid, st
                else:
                    hi = mid
            return ResidualX(hi - t, False, True)
    return ResidualX(series.t_end - t, True, False)


def expm_oracle(xi_box: np.ndarray, t: float) -> tuple[np.ndarray, float]:
    """Dense matrix exponential of the Dirichlet generator applied to the point mass."""
    from scipy.linalg import expm

    shape = xi_box.shape
    n = xi_box.size
    eye = np.eye(n).reshape((n,) + shape)
    gen = np.stack([apply_generator(e, xi_box).ravel() for e in eye], axis=1)
    # shift by the largest diagonal to keep expm in range
    shift = float(np.max(np.diag(gen)))
    u = expm(t * (gen - shift * np.eye(n)))[:, np.ravel_multi_index(tuple(s // 2 for s in shape), shape)]
    total = float(u.sum())
    return (u / total).reshape(shape), math.log(total) + shift * t
