"""Lazily evaluated i.i.d. Pareto(alpha) potential on Z^d.

The field is generated top-down on a hierarchy of dyadic blocks so that both
single-site evaluation and "all sites in an l1 ball above a threshold" queries
are cheap, even for balls with ~1e13 sites.

Construction (the exact law of an i.i.d. Pareto field):

* A level-``k`` block is a cube of side ``2**k`` holding ``n_k = 2**(k*d)``
  sites; its *exceedance set* ``E_k`` lists every site whose value is above
  ``u_k = n_k**(1/alpha)`` (one expected exceedance per block).
* Root blocks (level ``K = 62 // d``) draw ``|E_K| ~ Binomial(n_K, 1/n_K)``
  sites uniformly without replacement, with values ``u_K * U**(-1/alpha)``.
* A child block at level ``k-1`` inherits the parent's points that fall inside
  it and adds ``Binomial(n_{k-1} - inherited, (2**d - 1)/(n_k - 1))`` new sites,
  uniform among the free ones, with values Pareto-conditioned on
  ``(u_{k-1}, u_k]``.
* Leaf blocks (level ``L``, about 1024 sites) are materialized densely: free
  sites get Pareto values conditioned on ``<= u_L``.

All randomness comes from :mod:`pam_ageing.prf` streams keyed by
``(seed, level, block index)``, so any site or block can be evaluated in any
order with identical results.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import prf
from .analytics import ModelParams, eta, eta_array, l1_norm, phi
from .errors import DomainError, ResourceError

DOM_BLOCK = 0xB10C
DOM_LEAF = 0x1EAF

DEFAULT_SITE_BUDGET = 20_000_000
MAX_COORD = (1 << 62) - 1  # coordinates are int64
MAX_TOP_BLOCKS = 4096


def ball_site_count(d: int, radius: int) -> int:
    """Number of lattice points with l1 norm at most ``radius``."""
    if radius < 0:
        return 0
    return sum(2 ** k * math.comb(d, k) * math.comb(radius, k) for k in range(d + 1))


def ball_sites(d: int, radius: int) -> np.ndarray:
    """All sites of the l1 ball as an ``(n, d)`` int64 array (small radii only)."""
    if d == 1:
        return np.arange(-radius, radius + 1, dtype=np.int64)[:, None]
    axes = np.arange(-radius, radius + 1, dtype=np.int64)
    grid = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
    return grid[np.abs(grid).sum(axis=1) <= radius]


def _binomial_inverse(n: int, p: float, u: float) -> int:
    """Binomial(n, p) by CDF inversion; intended for small means ``n*p``."""
    if n <= 0 or p <= 0.0:
        return 0
    if p >= 1.0:
        return n
    pk = math.exp(n * math.log1p(-p))
    cdf = pk
    k = 0
    ratio = p / (1.0 - p)
    while u > cdf and k < n:
        pk *= (n - k) / (k + 1) * ratio
        k += 1
        cdf += pk
        if pk == 0.0:
            break
    return k


@dataclass
class PotentialSpec:
    """Seeded Pareto field with optional hand-set values.

    ``overrides`` maps coordinate tuples to values (all ``>= 1``) and takes
    precedence everywhere. With ``background`` set, every non-overridden site
    takes that constant instead of a random value.
    """

    params: ModelParams
    seed: int = 0
    overrides: Mapping[tuple, float] | None = None
    background: float | None = None
    site_budget: int = DEFAULT_SITE_BUDGET
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)
    _leaves: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        d = self.params.d
        self.seed = int(self.seed) & prf.MASK64
        ov = {}
        for k, v in (self.overrides or {}).items():
            key = tuple(int(c) for c in (k if isinstance(k, Iterable) else (k,)))
            if len(key) != d:
                raise DomainError(f"override site {k!r} does not have {d} coordinates")
            if not v >= 1:
                raise DomainError(f"override value at {k!r} must be >= 1, got {v}")
            ov[key] = float(v)
        self.overrides = ov
        if self.background is not None and not self.background >= 1:
            raise DomainError(f"background must be >= 1, got {self.background}")
        self.top = max(2, 62 // d)
        self.leaf = max(1, min(10 // d, self.top - 1))

    # -- hierarchy bookkeeping ---------------------------------------------

    def _n(self, level: int) -> int:
        return 1 << (level * self.params.d)

    def threshold(self, level: int) -> float:
        """Exceedance level ``u_k`` of a level-``k`` block."""
        return self._n(level) ** (1.0 / self.params.alpha)

    def _key(self, level: int, idx: tuple) -> int:
        return prf.derive_key(self.seed, DOM_BLOCK, level, *idx)

    def _offset_to_coords(self, level: int, idx: tuple, off: int) -> tuple:
        mask = (1 << level) - 1
        return tuple((b << level) + ((off >> (j * level)) & mask) for j, b in enumerate(idx))

    def _block(self, level: int, idx: tuple) -> list:
        """Exceedance set of a block: list of ``(coords, value)``."""
        ck = (level, idx)
        hit = self._cache.get(ck)
        if hit is not None:
            return hit
        d, alpha = self.params.d, self.params.alpha
        stream = prf.Stream(self._key(level, idx))
        n = self._n(level)
        shift = 64 - level * d
        if level == self.top:
            points = []
            taken = set()
            count = _binomial_inverse(n, 1.0 / n, stream.next_uniform())
            u_top = self.threshold(level)
            lo_p, hi_p, existing = 0.0, 0.0, []
        else:
            parent = self._block(level + 1, tuple(b >> 1 for b in idx))
            existing = [
                p for p in parent
                if all((c >> level) == b for c, b in zip(p[0], idx))
            ]
            points = list(existing)
            taken = {p[0] for p in existing}
            p_new = ((1 << d) - 1) / (self._n(level + 1) - 1)
            count = _binomial_inverse(n - len(existing), p_new, stream.next_uniform())
            lo_p = 1.0 / n
            hi_p = 1.0 / self._n(level + 1)
        for _ in range(count):
            while True:
                c = self._offset_to_coords(level, idx, stream.next_raw() >> shift)
                if c not in taken:
                    break
            taken.add(c)
            u = stream.next_uniform()
            if level == self.top:
                val = u_top * u ** (-1.0 / alpha)
            else:
                val = (lo_p - u * (lo_p - hi_p)) ** (-1.0 / alpha)
            points.append((c, val))
        self._cache[ck] = points
        return points

    def _leaf_values(self, idx: tuple) -> np.ndarray:
        """Dense values of a leaf block, flat in offset order."""
        hit = self._leaves.get(idx)
        if hit is not None:
            return hit
        level = self.leaf
        n = self._n(level)
        u = prf.uniforms(prf.derive_key(self.seed, DOM_LEAF, level, *idx), 0, n)
        vals = (1.0 - u * (1.0 - 1.0 / n)) ** (-1.0 / self.params.alpha)
        mask = (1 << level) - 1
        for c, v in self._block(level, idx):
            off = 0
            for j, cj in enumerate(c):
                off |= (cj & mask) << (j * level)
            vals[off] = v
        self._leaves[idx] = vals
        return vals

    def _leaf_coords(self, idx: tuple) -> np.ndarray:
        level = self.leaf
        n = self._n(level)
        off = np.arange(n, dtype=np.int64)
        mask = (1 << level) - 1
        cols = [(np.int64(b) << level) + ((off >> (j * level)) & mask) for j, b in enumerate(idx)]
        return np.stack(cols, axis=1)

    def clear_cache(self) -> None:
        self._cache.clear()
        self._leaves.clear()

    # -- queries -----------------------------------------------------------

    def _generated(self, site: tuple) -> float:
        level = self.leaf
        idx = tuple(c >> level for c in site)
        vals = self._leaf_values(idx)
        mask = (1 << level) - 1
        off = 0
        for j, cj in enumerate(site):
            off |= (cj & mask) << (j * level)
        return float(vals[off])

    def xi(self, site: Sequence[int]) -> float:
        site = tuple(int(c) for c in site)
        if len(site) != self.params.d:
            raise DomainError(f"site {site} does not have {self.params.d} coordinates")
        if site in self.overrides:
            return self.overrides[site]
        if self.background is not None:
            return float(self.background)
        return self._generated(site)

    def xi_many(self, sites: np.ndarray) -> np.ndarray:
        sites = np.asarray(sites, dtype=np.int64).reshape(-1, self.params.d)
        return np.array([self.xi(s) for s in sites.tolist()], dtype=np.float64)

    def _blocks_in_ball(self, level: int, radius: int) -> list:
        """Indices of level-``level`` blocks meeting the l1 ball, found top-down."""
        d = self.params.d
        top = self.top
        if radius > MAX_COORD:
            raise ResourceError(f"radius {radius} exceeds the largest lattice coordinate {MAX_COORD}")
        if (2 * (radius >> top) + 2) ** d > MAX_TOP_BLOCKS:
            raise ResourceError(f"radius {radius} meets more than {MAX_TOP_BLOCKS} top-level blocks")
        span = range(-((radius >> top) + 1), (radius >> top) + 1)
        current = [idx for idx in itertools.product(span, repeat=d)
                   if self._block_dist(top, idx) <= radius]
        for lev in range(top, level, -1):
            nxt = []
            for idx in current:
                self._block(lev, idx)
                for bits in itertools.product((0, 1), repeat=d):
                    child = tuple(2 * b + e for b, e in zip(idx, bits))
                    if self._block_dist(lev - 1, child) <= radius:
                        nxt.append(child)
            current = nxt
        return current

    @staticmethod
    def _block_dist(level: int, idx: tuple) -> int:
        dist = 0
        side = 1 << level
        for b in idx:
            lo = b * side
            hi = lo + side - 1
            if lo > 0:
                dist += lo
            elif hi < 0:
                dist += -hi
        return dist

    def exceedances(self, radius: int, threshold: float) -> tuple[np.ndarray, np.ndarray]:
        """Sites with ``|z| <= radius`` and ``xi(z) > threshold``.

        Returns ``(coords, values)`` with coords an ``(n, d)`` int64 array,
        ordered lexicographically by coordinates.
        """
        radius = int(radius)
        d = self.params.d
        if radius < 0:
            return np.zeros((0, d), dtype=np.int64), np.zeros(0)
        parts_c, parts_v = [], []
        if self.background is not None:
            if self.background > threshold:
                self._check_budget(radius)
                sites = ball_sites(d, radius)
                parts_c.append(sites)
                parts_v.append(np.full(sites.shape[0], float(self.background)))
        elif threshold < self.threshold(self.leaf):
            self._check_budget(radius)
            for idx in self._blocks_in_ball(self.leaf, radius):
                coords = self._leaf_coords(idx)
                vals = self._leaf_values(idx)
                keep = (np.abs(coords).sum(axis=1) <= radius) & (vals > threshold)
                parts_c.append(coords[keep])
                parts_v.append(vals[keep])
        else:
            # coarsest level whose exceedance sets already hold every value > threshold
            level = self.top
            while level > self.leaf and self.threshold(level) > threshold:
                level -= 1
            found = [
                (c, v)
                for idx in self._blocks_in_ball(level, radius)
                for c, v in self._block(level, idx)
                if v > threshold and sum(abs(x) for x in c) <= radius
            ]
            if found:
                parts_c.append(np.array([c for c, _ in found], dtype=np.int64).reshape(-1, d))
                parts_v.append(np.array([v for _, v in found]))
        coords = np.concatenate(parts_c) if parts_c else np.zeros((0, d), dtype=np.int64)
        vals = np.concatenate(parts_v) if parts_v else np.zeros(0)
        if self.overrides:
            ov = [(c, v) for c, v in self.overrides.items() if l1_norm(c) <= radius]
            if ov and len(coords):
                ov_set = {c for c, _ in ov}
                drop = np.array([tuple(c) in ov_set for c in coords.tolist()], dtype=bool)
                coords, vals = coords[~drop], vals[~drop]
            extra = [(c, v) for c, v in ov if v > threshold]
            if extra:
                coords = np.concatenate([coords, np.array([c for c, _ in extra], dtype=np.int64)])
                vals = np.concatenate([vals, np.array([v for _, v in extra])])
        order = np.lexsort(coords.T[::-1]) if len(coords) else np.zeros(0, dtype=np.int64)
        return coords[order], vals[order]

    @staticmethod
    def _block_span(level: int, idx: tuple) -> tuple[int, int]:
        """Smallest and largest l1 norm inside a block."""
        lo_d = hi_d = 0
        side = 1 << level
        for b in idx:
            lo = b * side
            hi = lo + side - 1
            lo_d += lo if lo > 0 else (-hi if hi < 0 else 0)
            hi_d += max(abs(lo), abs(hi))
        return lo_d, hi_d

    def exceedances_profile(self, r_min: int, r_max: int, level_fn) -> tuple[np.ndarray, np.ndarray]:
        """Sites with ``r_min < |z| <= r_max`` and ``xi(z) > level_fn(|z|)``.

        ``level_fn`` must be nondecreasing in the radius; blocks are pruned with
        the value it takes at their nearest point, so far-away shells cost only
        the few blocks that can still hold a large enough value.
        """
        d = self.params.d
        r_min, r_max = int(r_min), int(r_max)
        found_c, found_v = [], []
        if r_max > r_min and self.background is not None:
            if self.background > level_fn(r_min + 1):
                c, v = self.exceedances(r_max, -1.0)
                nrm = np.abs(c).sum(axis=1)
                lv = np.array([level_fn(int(r)) for r in nrm]) if len(nrm) else np.zeros(0)
                keep = (nrm > r_min) & (v > lv)
                found_c.append(c[keep])
                found_v.append(v[keep])
        elif r_max > r_min:
            top, leaf = self.top, self.leaf
            span = range(-((r_max >> top) + 1), (r_max >> top) + 1)
            stack = [(top, idx) for idx in itertools.product(span, repeat=d)]
            while stack:
                level, idx = stack.pop()
                lo_d, hi_d = self._block_span(level, idx)
                if lo_d > r_max or hi_d <= r_min:
                    continue
                lvl = level_fn(max(lo_d, r_min + 1))
                if lvl >= self.threshold(level):
                    for c, v in self._block(level, idx):
                        if v > lvl:
                            n = sum(abs(x) for x in c)
                            if r_min < n <= r_max and v > level_fn(n):
                                found_c.append(np.array([c], dtype=np.int64))
                                found_v.append(np.array([v]))
                elif level > leaf:
                    self._block(level, idx)
                    for bits in itertools.product((0, 1), repeat=d):
                        stack.append((level - 1, tuple(2 * b + e for b, e in zip(idx, bits))))
                else:
                    coords = self._leaf_coords(idx)
                    vals = self._leaf_values(idx)
                    nrm = np.abs(coords).sum(axis=1)
                    keep = (nrm > r_min) & (nrm <= r_max) & (vals > lvl)
                    for c, v, n in zip(coords[keep], vals[keep], nrm[keep]):
                        if v > level_fn(int(n)):
                            found_c.append(c.reshape(1, d))
                            found_v.append(np.array([v]))
        coords = np.concatenate(found_c) if found_c else np.zeros((0, d), dtype=np.int64)
        vals = np.concatenate(found_v) if found_v else np.zeros(0)
        if self.overrides:
            if len(coords):
                drop = np.array([tuple(c) in self.overrides for c in coords.tolist()], dtype=bool)
                coords, vals = coords[~drop], vals[~drop]
            extra = [(c, v) for c, v in self.overrides.items()
                     if r_min < l1_norm(c) <= r_max and v > level_fn(l1_norm(c))]
            if extra:
                coords = np.concatenate([coords, np.array([c for c, _ in extra], dtype=np.int64)])
                vals = np.concatenate([vals, np.array([v for _, v in extra])])
        order = np.lexsort(coords.T[::-1]) if len(coords) else np.zeros(0, dtype=np.int64)
        return coords[order], vals[order]

    def dense_ball(self, radius: int) -> tuple[np.ndarray, np.ndarray]:
        """Every site of the l1 ball with its value."""
        return self.exceedances(radius, 0.0)

    def box_values(self, radius: int) -> np.ndarray:
        """Values on the cube ``[-radius, radius]^d`` as a d-dimensional array."""
        d = self.params.d
        side = 2 * radius + 1
        if side ** d > self.site_budget:
            raise ResourceError(f"box of {side ** d} sites exceeds budget {self.site_budget}")
        axes = np.arange(-radius, radius + 1, dtype=np.int64)
        grid = np.stack(np.meshgrid(*([axes] * d), indexing="ij"), axis=-1).reshape(-1, d)
        if self.background is not None:
            vals = np.full(grid.shape[0], float(self.background))
        else:
            vals = self._values_at(grid)
        arr = vals.reshape((side,) * d)
        for c, v in self.overrides.items():
            if max(abs(x) for x in c) <= radius:
                arr[tuple(x + radius for x in c)] = v
        return arr

    def _values_at(self, grid: np.ndarray) -> np.ndarray:
        level = self.leaf
        mask = (1 << level) - 1
        blocks = grid >> level
        local = grid & mask
        off = np.zeros(grid.shape[0], dtype=np.int64)
        for j in range(grid.shape[1]):
            off |= local[:, j] << (j * level)
        vals = np.empty(grid.shape[0])
        uniq, inv = np.unique(blocks, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        for i, b in enumerate(uniq.tolist()):
            sel = inv == i
            vals[sel] = self._leaf_values(tuple(b))[off[sel]]
        return vals

    def _check_budget(self, radius: int) -> None:
        n = ball_site_count(self.params.d, radius)
        if n > self.site_budget:
            raise ResourceError(
                f"ball of radius {radius} has {n} sites, budget is {self.site_budget}"
            )

    def describe(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "seed": self.seed,
            "overrides": [[list(k), v] for k, v in sorted(self.overrides.items())],
            "background": self.background,
        }


def xi(spec: PotentialSpec, site: Sequence[int]) -> float:
    return spec.xi(site)


def _rank_key(phi_val: float, site: tuple):
    # descending phi, then larger l1 norm, then lexicographic coordinates
    return (-phi_val, -l1_norm(site), site)


def scan_candidates(spec: PotentialSpec, t: float, radius: int, keep: int) -> list:
    """Top ``keep`` sites of the ball by ``phi_t``, as ``(site, xi, phi)`` tuples.

    Sites whose gate ``t*xi >= |z|`` fails are skipped; they have ``phi_t = 0``
    and cannot beat the origin.
    """
    if radius < 0 or keep < 1:
        raise DomainError("need radius >= 0 and keep >= 1")
    coords, vals = spec.dense_ball(radius)
    norms = np.abs(coords).sum(axis=1)
    gate = t * vals >= norms
    coords, vals, norms = coords[gate], vals[gate], norms[gate]
    etas = eta_array(np.abs(coords))
    phis = vals - (norms * np.log(vals) - etas) / t
    rows = [(tuple(c), float(v), float(p)) for c, v, p in zip(coords.tolist(), vals, phis)]
    rows.sort(key=lambda r: _rank_key(r[2], r[0]))
    return rows[:keep]


def load_overrides(path: str | Path) -> dict:
    """Read an override document.

    Format: ``{"d": 1, "background": 1.0, "sites": [[[1], 4.0], [[3], 6.0]]}``;
    ``background`` is optional. Returns keyword arguments for :class:`PotentialSpec`.
    """
    doc = json.loads(Path(path).read_text())
    d = int(doc["d"])
    sites = {}
    for coords, value in doc["sites"]:
        coords = tuple(int(c) for c in coords)
        if len(coords) != d:
            raise DomainError(f"site {coords} does not have {d} coordinates")
        sites[coords] = float(value)
    return {"overrides": sites, "background": doc.get("background")}


def dump_overrides(spec: PotentialSpec, path: str | Path) -> None:
    doc = {
        "d": spec.params.d,
        "background": spec.background,
        "sites": [[list(k), v] for k, v in sorted(spec.overrides.items())],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
